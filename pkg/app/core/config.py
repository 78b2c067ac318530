from pydantic_settings import BaseSettings
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Settings(BaseSettings):
    # Application
    PROJECT_NAME: str = "Transverse Microlocal Lab"
    VERSION: str = "1.0.0"
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")
    DEFAULT_THREADS: int = int(os.getenv("DEFAULT_THREADS", "1"))
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "0"))

    # Flow integration
    RK4_STEP: float = float(os.getenv("RK4_STEP", "1e-3"))
    ETA_MIN: float = float(os.getenv("ETA_MIN", "1e-6"))
    ODE_TOLERANCE: float = float(os.getenv("ODE_TOLERANCE", "1e-8"))

    # Symbol representation
    N_THETA: int = int(os.getenv("N_THETA", "64"))
    SYMBOL_GRID: int = int(os.getenv("SYMBOL_GRID", "32"))
    LEAF_PAD: int = int(os.getenv("LEAF_PAD", "2"))
    TRANSVERSE_PAD: int = int(os.getenv("TRANSVERSE_PAD", "4"))

    # Operator assembly
    COEFFICIENT_GRID: int = int(os.getenv("COEFFICIENT_GRID", "64"))
    COEFFICIENT_TOLERANCE: float = float(os.getenv("COEFFICIENT_TOLERANCE", "1e-14"))
    EXACTNESS_TOLERANCE: float = float(os.getenv("EXACTNESS_TOLERANCE", "1e-10"))

    class Config:
        env_file = ".env"
        case_sensitive = True

# Create settings instance
settings = Settings()
