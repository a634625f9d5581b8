from .lambertian import LambertianRegressor, lambertian_solve, lambertian_solve_batch
from .loss import angular_loss, angular_loss_grad
