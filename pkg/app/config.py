from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Fixed-point solver
    solver_tolerance: float = 1e-12
    solver_max_iterations: int = 10000
    solver_damping: float = 0.5
    solver_patience: int = 100
    solver_retry_attempts: int = 3

    # Bulk support scan
    support_epsilon: float = 1e-6
    density_threshold: float = 1e-3
    edge_tolerance: float = 1e-8
    support_resolution: int = 2000

    # Spike search
    root_grid_points: int = 400
    exterior_factor: float = 3.0
    root_tolerance: float = 1e-10
    multiplicity_tolerance: float = 1e-8
    exclusion_window: float = 1e-6
    derivative_zero_threshold: float = 1e-8
    finite_difference_step: float = 1e-5

    # Growth-rate diagnostics (heuristic)
    growth_mean_threshold: float = 10.0
    growth_cov_threshold: float = 50.0
    growth_trace_threshold: float = 10.0

    # k-means
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-9

    # Empirical spike detection
    margin_null_seeds: int = 20

    # Runtime
    max_workers: int = 4
    log_level: str = "INFO"

    class Config:
        env_file = ".env.local"
        case_sensitive = False


settings = Settings()
