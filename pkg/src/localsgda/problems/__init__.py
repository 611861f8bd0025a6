from localsgda.problems.base import MinimaxProblem, MissingOracleError, project_ball
from localsgda.problems.gradcheck import finite_diff_check
from localsgda.problems.linreg import Ball, Penalty, RobustLinReg, robust_linreg_grad
from localsgda.problems.mlp import RobustMlp, mlp_grad, random_mlp_problem
from localsgda.problems.quadratic import QuadraticSaddle, SingularSystemError, quadratic_grad, quadratic_saddle_solve
from localsgda.problems.toys import NcplToy, NcscToy, ncsc_envelope

__all__ = [
    "Ball",
    "MinimaxProblem",
    "MissingOracleError",
    "NcplToy",
    "NcscToy",
    "Penalty",
    "QuadraticSaddle",
    "RobustLinReg",
    "RobustMlp",
    "SingularSystemError",
    "finite_diff_check",
    "mlp_grad",
    "ncsc_envelope",
    "project_ball",
    "quadratic_grad",
    "quadratic_saddle_solve",
    "random_mlp_problem",
    "robust_linreg_grad",
]
