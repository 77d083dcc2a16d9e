from fastapi import FastAPI

from fkpm.api.routes import router

app = FastAPI(
    title="Feynman-Kac Particle Models API",
    description="Particle runs, exact semigroup analysis and concentration bounds for Feynman-Kac models",
    version="1.0.0",
)

app.include_router(router, prefix="/api/v1", tags=["fkpm"])


@app.get("/")
async def root():
    return {"message": "Feynman-Kac Particle Models API"}


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("fkpm.main:app", host="0.0.0.0", port=8000, reload=True)
