"""Render a handful of Gaussian primitives and inspect the compositing.

Builds a tiny cloud by hand, projects it, rasterizes it, and prints the
closed-form value of the center pixel next to the rendered one.
"""
import numpy as np

from gaussianhead.core import CameraPose, GaussianCloud, project_gaussians
from gaussianhead.formats import save_png
from gaussianhead.rasterizer import rasterize_forward

cam = CameraPose(rotation=np.eye(3), translation=np.zeros(3),
                 fx=64.0, fy=64.0, cx=32.0, cy=32.0, image_w=64, image_h=64)

# three splats: red in front, green behind it, blue off to the side
cloud = GaussianCloud(
    mu=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.35, -0.2, 1.5]]),
    scale_log=np.full((3, 3), np.log(0.08)),
    rot=np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)),
    opacity_logit=np.array([0.0, 2.0, 1.0]),
    feat=np.eye(3),
    branch_tag=np.zeros(3, dtype=np.uint8))

img, record = rasterize_forward(cloud, cam)
print("rendered feature image:", img.data.shape, "alpha range",
      float(img.alpha.min()), "to", float(img.alpha.max()))

# closed-form check for the center pixel: front-to-back over the two
# on-axis splats, alpha_i = sigmoid(logit) * exp(-0.5 d^T conic d)
proj = project_gaussians(cloud.mu, cloud.scale_log, cloud.rot, cam)
center = np.array([32.5, 32.5])
t = 1.0
expected = np.zeros(3)
for i in (0, 1):  # depth order
    conic = np.linalg.inv(proj.cov2d[i])
    d = center - proj.mean2d[i]
    alpha = min(1.0 / (1.0 + np.exp(-cloud.opacity_logit[i]))
                * np.exp(-0.5 * d @ conic @ d), 0.99)
    expected += t * alpha * cloud.feat[i]
    t *= 1.0 - alpha
print("center pixel, rendered :", img.data[32, 32])
print("center pixel, by hand  :", expected)
print("max abs difference     :", np.abs(img.data[32, 32] - expected).max())

save_png(np.clip(img.data, 0.0, 1.0), "demo01_splats.png")
print("wrote demo01_splats.png")
