"""Tour of the tensor tape: record a computation, run backward, check against finite differences."""

import numpy as np

from gradleak import tensor as T
from gradleak.tensor import Tensor

rng = np.random.default_rng(0)

# leaves that want gradients
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
x = Tensor(rng.standard_normal((5, 4)))

# everything inside the block is recorded; backward walks it once, newest first
with T.Tape() as tape:
    h = T.gelu(T.matmul(x, w))
    loss = T.sum(T.log_softmax(h, axis=-1)[:, 0]) * -1.0
    tape.backward(loss)

print("loss", loss.item())
print("nodes on tape", len(tape))
print("dloss/dw\n", w.grad.data.round(4))

# the tape is spent after one backward; a second call raises TapeError
try:
    tape.backward(loss)
except T.TapeError as e:
    print("second backward:", e)


# central differences on a single entry
def f(wv):
    with T.no_grad():
        h = T.gelu(T.matmul(x, Tensor(wv)))
        return -T.sum(T.log_softmax(h, axis=-1)[:, 0]).item()


h_step = 1e-5
e = np.zeros((4, 3))
e[1, 2] = h_step
fd = (f(w.data + e) - f(w.data - e)) / (2 * h_step)
print(f"entry [1,2]: tape {w.grad.data[1, 2]:.10f}  finite diff {fd:.10f}")

# convolutions use NHWC input and HWIO kernels
img = Tensor(rng.random((1, 6, 6, 2)), requires_grad=True)
k = Tensor(rng.standard_normal((3, 3, 2, 4)))
with T.Tape() as tape:
    out = T.conv2d(img, k, stride=2, padding=1)
    tape.backward(T.l2_norm(out))
print("conv output", out.shape, "input grad", img.grad.shape)
