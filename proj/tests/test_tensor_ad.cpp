#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "atlas_istn/adam.hpp"
#include "atlas_istn/grad_check.hpp"
#include "atlas_istn/io.hpp"
#include "atlas_istn/ops.hpp"
#include "test_util.hpp"

using namespace atlas_istn;
using atlas_istn::testing::projected_grad_error;
using atlas_istn::testing::random_tensor;

namespace {

constexpr int kSeeds = 10;
constexpr double kTol = 1e-3;

}  // namespace

TEST(Conv2d, OnesKernelSumsNeighbourhood) {
    Tensor<float> x(Shape{1, 1, 3, 3}, 1.f), w(Shape{1, 1, 3, 3}, 1.f), b(Shape{1}, 0.f);
    auto y = conv2d(x, w, b, 1, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_FLOAT_EQ(y.at(4), 9.f);
    EXPECT_FLOAT_EQ(y.at(0), 4.f);
}

TEST(Conv2d, ZeroKernelGivesZero) {
    auto x = cast<float>(random_tensor({2, 3, 5, 7}, 1));
    Tensor<float> w(Shape{4, 3, 3, 3}, 0.f), b(Shape{4}, 0.f);
    auto y = conv2d(x, w, b, 1, 1);
    for (float v : y.data()) EXPECT_EQ(v, 0.f);
}

TEST(Conv2d, StrideTwoHalvesEvenSizes) {
    Tensor<float> x(Shape{1, 1, 8, 6}), w(Shape{2, 1, 3, 3}), b(Shape{2});
    EXPECT_EQ(conv2d(x, w, b, 2, 1).shape(), (Shape{1, 2, 4, 3}));
}

TEST(Conv2d, ShapeMismatchThrows) {
    Tensor<float> x(Shape{1, 2, 4, 4}), w(Shape{1, 3, 3, 3}), b(Shape{1});
    EXPECT_THROW(conv2d(x, w, b, 1, 1), shape_error);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    for (int s = 0; s < kSeeds; ++s) {
        for (std::size_t stride : {1, 2}) {
            auto op = [stride](const std::vector<Tensor<double>>& v) { return conv2d(v[0], v[1], v[2], stride, 1); };
            double err = projected_grad_error(op,
                                              {random_tensor({1, 2, 8, 8}, 100 + s), random_tensor({3, 2, 3, 3}, 200 + s),
                                               random_tensor({3}, 300 + s)},
                                              400 + s);
            EXPECT_LT(err, kTol) << "seed " << s << " stride " << stride;
        }
    }
}

TEST(Relu, Examples) {
    Tensor<float> x(Shape{3}, std::vector<float>{-1.f, 0.f, 2.f});
    auto y = relu(x);
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0.f, 0.f, 2.f}));
    Tensor<float> pos(Shape{4}, std::vector<float>{0.5f, 1.f, 2.f, 3.f});
    auto z = relu(pos);
    EXPECT_TRUE(std::equal(z.data().begin(), z.data().end(), pos.data().begin()));
}

TEST(Relu, GradientIsPositiveMask) {
    for (int s = 0; s < kSeeds; ++s) {
        auto x = random_tensor({50}, 500 + s);
        for (double& v : x.mutable_data())
            if (std::abs(v) < 1e-3) v = 0.5;
        x.set_requires_grad(true);
        backward(dot(relu(x), Tensor<double>(Shape{50}, 1.0)));
        for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(x.grad()[i], x.at(i) > 0 ? 1.0 : 0.0);
        auto op = [](const std::vector<Tensor<double>>& v) { return relu(v[0]); };
        EXPECT_LT(projected_grad_error(op, {x.detach()}, 600 + s), kTol);
    }
}

TEST(Relu, SubgradientAtZeroIsZero) {
    Tensor<double> x(Shape{1}, 0.0);
    x.set_requires_grad(true);
    backward(dot(relu(x), Tensor<double>(Shape{1}, 1.0)));
    EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Upsample, ConstantStaysConstant) {
    Tensor<float> x(Shape{1, 2, 4, 5}, 0.37f);
    auto y = upsample_bilinear_2x(x);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 8, 10}));
    for (float v : y.data()) EXPECT_NEAR(v, 0.37f, 1e-7);
}

TEST(Upsample, AlignCornersWeights) {
    Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{0, 1, 0, 1});
    auto y = upsample_bilinear_2x(x);
    const double expected[4] = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at(r * 4 + c), expected[c], 1e-12);
}

TEST(Upsample, GradientMatchesFiniteDifferences) {
    for (int s = 0; s < kSeeds; ++s) {
        auto op = [](const std::vector<Tensor<double>>& v) { return upsample_bilinear_2x(v[0]); };
        EXPECT_LT(projected_grad_error(op, {random_tensor({1, 2, 3, 4}, 700 + s)}, 800 + s), kTol);
    }
}

TEST(Mse, Examples) {
    Tensor<float> a(Shape{2}, std::vector<float>{1.f, 0.f}), b(Shape{2}, 0.f);
    EXPECT_FLOAT_EQ(mse(a, b).item(), 0.5f);
    EXPECT_FLOAT_EQ(mse(a, a).item(), 0.f);
    EXPECT_THROW(mse(a, Tensor<float>(Shape{3})), shape_error);
}

TEST(Mse, GradientIsScaledDifference) {
    auto a = random_tensor({3, 4}, 11), b = random_tensor({3, 4}, 12);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    backward(mse(a, b));
    for (std::size_t i = 0; i < 12; ++i) {
        EXPECT_NEAR(a.grad()[i], 2.0 * (a.at(i) - b.at(i)) / 12.0, 1e-15);
        EXPECT_NEAR(b.grad()[i], -2.0 * (a.at(i) - b.at(i)) / 12.0, 1e-15);
    }
}

TEST(GradCheck, LinearFunctionIsExactToRoundoff) {
    auto w = random_tensor({20}, 5);
    auto f = [&](const std::vector<Tensor<double>>& v) { return dot(v[0], w); };
    auto r = grad_check<double>(f, {random_tensor({20}, 6)}, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, MseOfConvolution) {
    for (int s = 0; s < kSeeds; ++s) {
        auto target = random_tensor({1, 2, 6, 6}, 900 + s);
        auto f = [&](const std::vector<Tensor<double>>& v) {
            return scalar_mul(mse(conv2d(v[0], v[1], v[2], 1, 1), target), 100.0);
        };
        auto r = grad_check<double>(
            f, {random_tensor({1, 3, 6, 6}, 1000 + s), random_tensor({2, 3, 3, 3}, 1100 + s), random_tensor({2}, 1200 + s)},
            1e-6);
        EXPECT_LT(r.max_rel_error, kTol);
    }
}

TEST(PlumbingOps, GradientsMatchFiniteDifferences) {
    std::map<std::string, std::pair<atlas_istn::testing::Op, std::vector<Shape>>> cases{
        {"add", {[](const auto& v) { return add(v[0], v[1]); }, {{2, 3}, {2, 3}}}},
        {"scalar_mul", {[](const auto& v) { return scalar_mul(v[0], -1.7); }, {{4, 2}}}},
        {"concat_channels", {[](const auto& v) { return concat_channels<double>({v[0], v[1]}); }, {{2, 1, 3, 3}, {2, 2, 3, 3}}}},
        {"slice_channels", {[](const auto& v) { return slice_channels(v[0], 1, 3); }, {{2, 3, 2, 2}}}},
        {"repeat_batch", {[](const auto& v) { return repeat_batch(v[0], 3); }, {{1, 2, 2, 2}}}},
        {"global_mean_pool", {[](const auto& v) { return global_mean_pool(v[0]); }, {{2, 3, 4, 4}}}},
        {"fully_connected", {[](const auto& v) { return fully_connected(v[0], v[1], v[2]); }, {{3, 5}, {4, 5}, {4}}}},
        {"dot", {[](const auto& v) { return dot(v[0], v[1]); }, {{6}, {6}}}},
    };
    for (const auto& [name, c] : cases)
        for (int s = 0; s < kSeeds; ++s) {
            std::vector<Tensor<double>> inputs;
            for (std::size_t k = 0; k < c.second.size(); ++k) inputs.push_back(random_tensor(c.second[k], 31 * s + k));
            EXPECT_LT(projected_grad_error(c.first, inputs, 77 + s), kTol) << name << " seed " << s;
        }
}

TEST(Tape, ReverseTopologicalOrder) {
    auto x = random_tensor({1, 1, 4, 4}, 3).set_requires_grad(true);
    auto w = random_tensor({2, 1, 3, 3}, 4).set_requires_grad(true);
    auto b = random_tensor({2}, 5).set_requires_grad(true);
    auto h = relu(conv2d(x, w, b, 1, 1));
    auto y = add(concat_channels<double>({h, h}), scalar_mul(concat_channels<double>({h, h}), 2.0));
    auto loss = mse(y, Tensor<double>(y.shape(), 0.0));
    Tape<double> tape(loss);
    std::map<const void*, std::size_t> pos;
    for (std::size_t i = 0; i < tape.nodes().size(); ++i) pos[tape.nodes()[i]] = i;
    EXPECT_EQ(pos.size(), tape.size());
    for (auto* node : tape.nodes())
        if (node->grad_fn)
            for (const auto& in : node->grad_fn->inputs)
                if (in->requires_grad) EXPECT_LT(pos.at(in.get()), pos.at(node));
    EXPECT_EQ(tape.nodes().back(), loss.impl().get());
}

TEST(Tape, BackwardIsBitReproducible) {
    auto run = [] {
        auto x = cast<float>(random_tensor({2, 3, 8, 8}, 42));
        auto w = cast<float>(random_tensor({4, 3, 3, 3}, 43)).set_requires_grad(true);
        auto b = cast<float>(random_tensor({4}, 44)).set_requires_grad(true);
        auto y = upsample_bilinear_2x(relu(conv2d(x, w, b, 2, 1)));
        backward(mse(y, Tensor<float>(y.shape(), 0.25f)));
        std::vector<float> g(w.grad().begin(), w.grad().end());
        g.insert(g.end(), b.grad().begin(), b.grad().end());
        return g;
    };
    auto a = run(), c = run();
    ASSERT_EQ(a.size(), c.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(a[i]), std::bit_cast<std::uint32_t>(c[i]));
}

TEST(Tape, NoGradGuardSkipsRecording) {
    auto x = random_tensor({3}, 1).set_requires_grad(true);
    NoGradGuard ng;
    auto y = scalar_mul(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}

TEST(Tensor, NonFiniteOutputRaises) {
    Tensor<float> x(Shape{2}, std::vector<float>{1.f, std::numeric_limits<float>::infinity()});
    EXPECT_THROW(scalar_mul(x, 2.f), numeric_error);
    Tensor<float> n(Shape{1}, std::numeric_limits<float>::quiet_NaN());
    EXPECT_THROW(relu(n), numeric_error);
}

TEST(Tensor, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1.f}), shape_error);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    ParamSet<float> ps;
    auto& p = ps.add("w", Tensor<float>(Shape{3}, std::vector<float>{1.f, -2.f, 3.f}));
    AdamState<float> st;
    for (int i = 0; i < 5; ++i) {
        p.mutable_grad();  // zero-filled
        adam_step(ps, st, 1e-3);
    }
    EXPECT_EQ(p.at(0), 1.f);
    EXPECT_EQ(p.at(1), -2.f);
    EXPECT_EQ(p.at(2), 3.f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamSet<double> ps;
    auto& p = ps.add("x", Tensor<double>(Shape{1}, 0.5));
    AdamState<double> st;
    p.mutable_grad()[0] = 1.0;
    adam_step(ps, st, 1e-3);
    // m_hat = v_hat = 1 after bias correction.
    EXPECT_NEAR(p.at(0), 0.5 - 1e-3 / (1.0 + 1e-8), 1e-15);
    EXPECT_EQ(st.m.at("x").size(), 1u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    ParamSet<float> ps;
    auto& p = ps.add("stn.head.w", Tensor<float>(Shape{2}, 0.f));
    p.mutable_grad()[1] = std::numeric_limits<float>::quiet_NaN();
    AdamState<float> st;
    try {
        adam_step(ps, st, 1e-3);
        FAIL() << "expected numeric_error";
    } catch (const numeric_error& e) {
        EXPECT_NE(std::string(e.what()).find("stn.head.w"), std::string::npos);
    }
}

TEST(Adam, HalfLifeDecay) {
    EXPECT_DOUBLE_EQ(decayed_learning_rate(1e-3, 500, 500), 5e-4);
    EXPECT_DOUBLE_EQ(decayed_learning_rate(1e-3, 0, 500), 1e-3);
    EXPECT_DOUBLE_EQ(decayed_learning_rate(1e-3, 1000, 500), 2.5e-4);
}

TEST(Atn1, ByteLayout) {
    Tensor<float> t(Shape{2}, std::vector<float>{1.f, -2.f});
    auto bytes = encode_atn1(t);
    const std::vector<std::uint8_t> expected{'A', 'T', 'N', '1', 1, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
    EXPECT_EQ(bytes, expected);
}

TEST(Atn1, RoundTripIsBitExact) {
    for (int s = 0; s < 5; ++s) {
        auto t = cast<float>(random_tensor({2, 3, 4}, s, -1e3, 1e3));
        auto back = decode_atn1(encode_atn1(t));
        EXPECT_EQ(back.shape(), t.shape());
        EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), back.data().begin()));
    }
    Tensor<float> scalar = Tensor<float>::scalar(3.5f);
    EXPECT_EQ(decode_atn1(encode_atn1(scalar)).item(), 3.5f);
}

TEST(Atn1, RejectsCorruptInput) {
    auto bytes = encode_atn1(Tensor<float>(Shape{2, 2}, 1.f));
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(decode_atn1(truncated), io_error);
    bytes[0] = 'X';
    EXPECT_THROW(decode_atn1(bytes), io_error);
}
