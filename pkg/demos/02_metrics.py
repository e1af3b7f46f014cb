"""The five evaluation metrics on a hand-made pair of depth images."""
import numpy as np

from widepth import metrics as M

gt = np.zeros((64, 96))
gt[20:40, 30:50] = 0.6

# Same blob, moved 6 columns right and 3 rows down, a little shallower.
est = M.shift_image(gt, 6, 3) * 0.9
al = M.align_by_correlation(est, gt)
print("re-alignment shift:", (al.dx, al.dy))
for k, v in M.sample_metrics(est, gt, mask_threshold=0.05).items():
    print(f"{k:>10}: {v:.4f}")

# Shape error ignores position; soft IoU and MSE do not.
print("shape error of a pure translation:", M.shape_error(M.shift_image(gt, 6, 3), gt))
