"""Constants used across the cfsteer package."""

# Quadrature defaults
QUADRATURE_DEFAULTS = {
    'nodes_per_unit': 64,
    'absolute_tolerance': 1e-8,
    'multiplier': 1.0,
    'max_upper': 2.0e4,         # standardized frequency cap
    'max_nodes': 2 ** 21,
    'min_nodes_per_unit': 8,
    'chunk_elements': 2 ** 22   # nodes x evaluation points per vectorized block
}

# Gauss-Legendre nodes for the CF tail beyond the truncation point
TAIL_QUADRATURE_NODES = 64

# Standard deviation below which a linear combination is treated as a constant
DEGENERATE_STD = 1e-12

# Evaluation points beyond this many standard deviations short-circuit to 0/1
TAIL_CUTOFF_SIGMAS = 40.0

# Terminal density comparison grid
SUP_DEVIATION_GRID = {
    'points': 2001,
    'sigmas': 8.0
}

# Solver defaults
SOLVER_DEFAULTS = {
    'max_outer_iterations': 500,
    'max_inner_iterations': 200,
    'feasibility_tolerance': 1e-6,
    'stationarity_tolerance': 1e-6,
    'initial_penalty': 10.0,
    'penalty_growth': 10.0,
    'max_penalty': 1e8,
    'delta_min': 1e-6,
    'stall_tolerance': 1e-10,
    'stall_iterations': 5,      # outer iterations without progress at the maximum penalty
    'feasibility_backoff': 10.0,  # margins are driven to this many feasibility tolerances
    'restart_line_search': 50,  # maxls for the retry after a zero-step L-BFGS-B exit
    'gradient': 'analytic',
    'fd_step': 1e-6
}

GRADIENT_MODES = ['analytic', 'finite_difference']

# Monte-Carlo defaults
MC_DEFAULTS = {
    'sample_count': 10000,
    'min_sample_count': 100,
    'seed': 2023,
    'bins': 60,
    'range_sigmas': 5.0,
    'chunk_size': 4096,
    'path_samples': 20
}

# Kolmogorov-Smirnov 95% coefficient for the one-sample test
KS_COEFFICIENT_95 = 1.36

# CLI exit codes
EXIT_CODES = {
    'OK': 0,
    'SCENARIO_ERROR': 1,
    'INFEASIBLE': 2,
    'VALIDATION_FAILURE': 3,
    'SOLVER_FAILURE': 4
}

# Artifact file names
ARTIFACTS = {
    'solution': 'solution.csv',
    'table1': 'table1.csv',
    'table2': 'table2.csv',
    'trajectories': 'trajectories.csv',
    'terminal_density': 'terminal_density.csv',
    'terminal_histogram': 'terminal_histogram.csv',
    'constraints': 'constraints.csv',
    'scenario': 'scenario.json',
    'summary': 'summary.md'
}

# Absolute slack used when re-asserting emitted invariants
VERIFY_TOLERANCE = 1e-6
