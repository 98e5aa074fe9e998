#include <catch2/catch_amalgamated.hpp>

#include <capsdemm/ops.hpp>
#include <capsdemm/tensor.hpp>

using capsdemm::debug_checks;
using capsdemm::Tape;
using capsdemm::Tensor;

TEST_CASE("tensor shape and element bookkeeping") {
    Tensor<double> t({2, 3}, 1.5);
    REQUIRE(t.rank() == 2);
    REQUIRE(t.dim(0) == 2);
    REQUIRE(t.numel() == 6);
    REQUIRE(t.values()[5] == 1.5);
    REQUIRE_THROWS_AS(Tensor<double>({2, 0}), std::invalid_argument);
    REQUIRE_THROWS_AS((Tensor<double>({2, 2}, std::vector<double>{1.0})), std::invalid_argument);
    REQUIRE(Tensor<double>::scalar(4.0).item() == 4.0);
    REQUIRE_THROWS_AS(t.item(), std::invalid_argument);
}

TEST_CASE("copies alias storage and clone does not") {
    Tensor<double> a({2}, 3.0);
    Tensor<double> alias = a;
    alias.values()[0] = 9.0;
    REQUIRE(a.values()[0] == 9.0);
    Tensor<double> deep = a.clone();
    deep.values()[0] = 1.0;
    REQUIRE(a.values()[0] == 9.0);
    REQUIRE(a.same_node(alias));
    REQUIRE(!a.same_node(deep));
}

TEST_CASE("gradient storage follows requires_grad") {
    Tensor<double> t({3});
    REQUIRE_THROWS_AS(t.grad(), std::logic_error);
    t.set_requires_grad(true);
    REQUIRE(t.grad().size() == 3);
    t.grad()[0] = 5;
    t.zero_grad();
    REQUIRE(t.grad()[0] == 0);
}

TEST_CASE("ops outside a tape do not track") {
    Tensor<double> x({2}, 2.0);
    x.set_requires_grad(true);
    Tensor<double> y = capsdemm::scale(x, 3.0);
    REQUIRE(!y.requires_grad());
}

TEST_CASE("backward accumulates through a reused tensor") {
    Tensor<double> x({1}, std::vector<double>{3.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    // y = x*x + 2x, dy/dx = 2x + 2 = 8
    Tensor<double> y = capsdemm::add(capsdemm::mul(x, x), capsdemm::scale(x, 2.0));
    Tensor<double> loss = capsdemm::sum_all(y);
    tape.backward(loss);
    REQUIRE_THAT(x.grad()[0], Catch::Matchers::WithinAbs(8.0, 1e-12));
}

TEST_CASE("backward rejects non-scalar and untracked losses") {
    Tensor<double> x({2}, 1.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> y = capsdemm::scale(x, 2.0);
    REQUIRE_THROWS_AS(tape.backward(y), std::invalid_argument);
    Tensor<double> untracked = Tensor<double>::scalar(1.0);
    REQUIRE_THROWS_AS(tape.backward(untracked), std::invalid_argument);
}

TEST_CASE("nested tapes restore the previous active tape") {
    REQUIRE(Tape<double>::active() == nullptr);
    {
        Tape<double> outer;
        REQUIRE(Tape<double>::active() == &outer);
        {
            Tape<double> inner;
            REQUIRE(Tape<double>::active() == &inner);
        }
        REQUIRE(Tape<double>::active() == &outer);
    }
    REQUIRE(Tape<double>::active() == nullptr);
}

TEST_CASE("debug checks flag non-finite op outputs") {
    Tensor<double> a({1}, std::vector<double>{1.0});
    Tensor<double> b({1}, std::vector<double>{0.0});
    debug_checks() = true;
    REQUIRE_THROWS_AS(capsdemm::div(a, b), std::runtime_error);
    debug_checks() = false;
    REQUIRE_NOTHROW(capsdemm::div(a, b));
}
