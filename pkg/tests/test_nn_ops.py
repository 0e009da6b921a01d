import numpy as np
import pytest

from services import nn_ops
from services.lsk_module import seeded_params
from services.nn_ops import DENSE, DEPTHWISE, ConvWeights
from services.tensor_core import Normal, as_tensor, derive_seed, ones, seeded_fill, zeros
from utils.errors import ContractViolation
from utils.helpers import set_thread_count


def random_conv(kind, c_in, c_out, k, d, seed, stride=1, bias=True):
    conv = nn_ops.make_conv(kind, c_in, c_out, k, dilation=d, stride=stride, bias=bias)
    return seeded_params(conv, seed, std=1.0, bias_std=1.0 if bias else 0.0)


def oracle_instances(count=100):
    """Deterministic spread of geometries over k in {1,3,5,7,9,23}, d in 1..4."""
    kernels = (1, 3, 5, 7, 9, 23)
    for index in range(count):
        k = kernels[index % len(kernels)]
        d = 1 + (index // len(kernels)) % 4
        kind = DEPTHWISE if index % 3 else DENSE
        c_in = 1 + index % 3
        c_out = c_in if kind == DEPTHWISE else 1 + (index // 3) % 3
        size = 4 + index % 5 if k >= 9 else 5 + index % 4
        stride = 2 if index % 10 == 7 else 1
        yield index, kind, c_in, c_out, k, d, size, stride


class TestConvForward:
    def test_identity_kernel(self):
        x = seeded_fill((2, 3, 4, 5), 1, Normal())
        conv = ConvWeights(kind=DEPTHWISE, weight=np.ones((3, 1, 1, 1)), bias=np.zeros(3))
        np.testing.assert_array_equal(nn_ops.conv2d_forward(x, conv), x)

    def test_hand_convolution(self):
        conv = ConvWeights(kind=DEPTHWISE, weight=np.ones((1, 1, 3, 3)), bias=np.zeros(1))
        out = nn_ops.conv2d_forward(ones((1, 1, 3, 3)), conv)
        assert out[0, 0, 1, 1] == 9.0
        assert out[0, 0, 0, 0] == 4.0 and out[0, 0, 2, 2] == 4.0
        assert out[0, 0, 0, 1] == 6.0

    @pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (3, 4), (7, 3), (23, 1), (9, 2)])
    def test_same_padding(self, k, d):
        conv = random_conv(DEPTHWISE, 2, 2, k, d, 0)
        assert nn_ops.conv2d_forward(zeros((1, 2, 6, 7)), conv).shape == (1, 2, 6, 7)

    def test_stride_two_halves_rounding_up(self):
        conv = random_conv(DENSE, 2, 3, 3, 1, 0, stride=2)
        assert nn_ops.conv2d_forward(zeros((1, 2, 7, 8)), conv).shape == (1, 3, 4, 4)

    def test_matches_oracle_bitwise(self):
        for index, kind, c_in, c_out, k, d, size, stride in oracle_instances():
            conv = random_conv(kind, c_in, c_out, k, d, derive_seed(index, "w"), stride=stride, bias=index % 4 != 0)
            x = seeded_fill((1 + index % 2, c_in, size, size + 1), derive_seed(index, "x"), Normal())
            fast = nn_ops.conv2d_forward(x, conv)
            slow = nn_ops.conv2d_reference(x, conv)
            assert fast.tobytes() == slow.tobytes(), f"instance {index}: {kind} k={k} d={d} s={stride}"

    def test_parallel_matches_serial(self, monkeypatch):
        conv = random_conv(DENSE, 3, 7, 5, 2, 1)
        x = seeded_fill((2, 3, 9, 9), 2, Normal())
        serial = nn_ops.conv2d_forward(x, conv)
        monkeypatch.setattr(nn_ops, "_PARALLEL_MIN_WORK", 0)
        for threads in (2, 3, 4):
            set_thread_count(threads)
            assert nn_ops.conv2d_forward(x, conv).tobytes() == serial.tobytes()

    def test_errors(self):
        with pytest.raises(ContractViolation, match="channel mismatch"):
            nn_ops.conv2d_forward(zeros((1, 2, 4, 4)), random_conv(DENSE, 3, 1, 3, 1, 0))
        with pytest.raises(ContractViolation):
            ConvWeights(kind=DENSE, weight=np.zeros((1, 1, 2, 2)))
        with pytest.raises(ContractViolation):
            nn_ops.make_conv(DENSE, 1, 1, 3, dilation=0)
        with pytest.raises(ContractViolation):
            nn_ops.make_conv(DEPTHWISE, 2, 3, 3)


class TestConvVjp:
    def test_zero_upstream(self):
        conv = random_conv(DENSE, 2, 3, 3, 2, 5)
        x = seeded_fill((1, 2, 5, 5), 1, Normal())
        vjp = nn_ops.conv2d_vjp(x, conv, zeros((1, 3, 5, 5)))
        assert not np.any(vjp.grad_input)
        assert not np.any(vjp.grad_weights.weight) and not np.any(vjp.grad_weights.bias)

    def test_identity_kernel_passes_upstream(self):
        conv = ConvWeights(kind=DEPTHWISE, weight=np.ones((2, 1, 1, 1)), bias=np.zeros(2))
        x = seeded_fill((1, 2, 3, 3), 1, Normal())
        upstream = seeded_fill((1, 2, 3, 3), 2, Normal())
        np.testing.assert_array_equal(nn_ops.conv2d_vjp(x, conv, upstream).grad_input, upstream)

    def test_upstream_shape_checked(self):
        conv = random_conv(DENSE, 2, 3, 3, 1, 0)
        with pytest.raises(ContractViolation, match="upstream"):
            nn_ops.conv2d_vjp(zeros((1, 2, 4, 4)), conv, zeros((1, 2, 4, 4)))


class TestPointwise:
    def test_channel_pool_hand_values(self):
        x = as_tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
        assert nn_ops.channel_pool(x, "avg")[0, 0, 0, 0] == 2.0
        assert nn_ops.channel_pool(x, "max")[0, 0, 0, 0] == 3.0
        np.testing.assert_array_equal(nn_ops.channel_pool(x, "both").ravel(), [2.0, 3.0])

    def test_single_channel_pool_copies(self):
        x = seeded_fill((2, 1, 3, 3), 4, Normal())
        for mode in ("avg", "max"):
            np.testing.assert_array_equal(nn_ops.channel_pool(x, mode), x)

    def test_both_is_avg_then_max(self):
        x = seeded_fill((2, 7, 4, 4), 8, Normal())
        stacked = np.concatenate([nn_ops.channel_pool(x, "avg"), nn_ops.channel_pool(x, "max")], axis=1)
        np.testing.assert_array_equal(nn_ops.channel_pool(x, "both"), stacked)

    def test_max_pool_ties_go_to_lowest_channel(self):
        x = as_tensor(np.array([2.0, 2.0, 1.0]).reshape(1, 3, 1, 1))
        grad = nn_ops.channel_pool_vjp(x, "max", ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(grad.ravel(), [1.0, 0.0, 0.0])

    def test_pool_rejects_bad_mode(self):
        with pytest.raises(ContractViolation):
            nn_ops.channel_pool(zeros((1, 2, 2, 2)), "median")

    def test_activation_fixed_points(self):
        assert nn_ops.sigmoid(zeros((1, 1, 1, 1)))[0, 0, 0, 0] == 0.5
        assert nn_ops.gelu(zeros((1, 1, 1, 1)))[0, 0, 0, 0] == 0.0

    def test_sigmoid_strictly_inside_unit_interval(self):
        x = as_tensor(np.array([-800.0, -40.0, 0.0, 40.0, 800.0]).reshape(1, 1, 1, 5))
        s = nn_ops.sigmoid(x).ravel()
        assert np.all(s > 0.0) and np.all(s < 1.0)
        assert np.all(np.diff(s) >= 0.0)

    def test_residual_add_shape_check(self):
        with pytest.raises(ContractViolation):
            nn_ops.residual_add(zeros((1, 1, 2, 2)), zeros((1, 2, 2, 2)))

    def test_softmax_branches_sum_to_one(self):
        logits = [seeded_fill((2, 4, 1, 1), seed, Normal(0.0, 3.0)) for seed in range(3)]
        total = sum(nn_ops.softmax_branches(logits))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_softmax_equal_logits_are_uniform(self):
        logits = [ones((1, 5, 1, 1))] * 4
        for weight in nn_ops.softmax_branches(logits):
            np.testing.assert_allclose(weight, 0.25, atol=1e-15)

    def test_expand_ops_check_shapes(self):
        with pytest.raises(ContractViolation):
            nn_ops.expand_channels(zeros((1, 2, 2, 2)), 3)
        with pytest.raises(ContractViolation):
            nn_ops.expand_spatial(zeros((1, 2, 2, 2)), 4, 4)
        assert nn_ops.expand_spatial(ones((1, 2, 1, 1)), 3, 5).shape == (1, 2, 3, 5)
