#include <cmath>

#include "doctest.h"
#include "s2rd/simworld.hpp"

using namespace s2rd;

TEST_CASE("vehicle kinematics") {
    VehicleParams vp;

    SUBCASE("zero steering keeps the heading") {
        VehicleState st;
        st.speed = 1.0f;
        st.heading = 0.3f;
        auto s2 = step_vehicle(st, 0.0f, 0.8f, 0.1f, vp);
        CHECK(s2.heading == doctest::Approx(0.3f));
        CHECK(s2.x > st.x);
    }

    SUBCASE("constant steering traces the analytic circle") {
        VehicleState st;
        st.speed = 1.0f;
        vp.speed_tau = 1e-6f;  // pin speed at the commanded value
        const float steer_cmd = 0.6f;
        const float delta = steer_cmd * vp.max_steer;
        const float radius = vp.wheelbase / std::tan(delta);
        const float throttle = 1.0f / vp.max_speed;  // v_cmd = 1 m/s

        // centre of the circle for heading 0 at origin
        const float cx = 0.0f, cy = radius;
        const float circumference = 2.0f * 3.14159265f * std::abs(radius);
        const float dt = 0.01f;
        const int steps = static_cast<int>(circumference / (1.0f * dt));
        float max_err = 0;
        for (int i = 0; i < steps; ++i) {
            st = step_vehicle(st, steer_cmd, throttle, dt, vp);
            const float r = std::hypot(st.x - cx, st.y - cy);
            max_err = std::max(max_err, std::abs(r - std::abs(radius)));
        }
        CHECK(max_err / std::abs(radius) < 0.01);
        // one revolution returns near the start
        CHECK(std::hypot(st.x, st.y) < 0.05f * circumference);
    }

    SUBCASE("dt -> 0 approaches identity") {
        VehicleState st;
        st.x = 1;
        st.y = -2;
        st.heading = 0.7f;
        st.speed = 0.5f;
        auto s2 = step_vehicle(st, 0.5f, 0.5f, 1e-7f, vp);
        CHECK(s2.x == doctest::Approx(st.x).epsilon(1e-6));
        CHECK(s2.y == doctest::Approx(st.y).epsilon(1e-6));
        CHECK(s2.heading == doctest::Approx(st.heading).epsilon(1e-6));
        CHECK(s2.speed == doctest::Approx(st.speed).epsilon(1e-4));

        CHECK_THROWS_AS(step_vehicle(st, 0, 0, 0.0f, vp), UsageError);
    }

    SUBCASE("steering saturates at the configured bound") {
        VehicleState st;
        st.speed = 1.0f;
        auto s2 = step_vehicle(st, 5.0f, 0.5f, 0.05f, vp);
        CHECK(s2.steering == doctest::Approx(vp.max_steer));
        auto s3 = step_vehicle(st, -5.0f, 0.5f, 0.05f, vp);
        CHECK(s3.steering == doctest::Approx(-vp.max_steer));
    }
}

TEST_CASE("track world geometry") {
    WorldConfig cfg;
    TrackWorld world(cfg, WorldStyle::Sim);

    CHECK(world.length() > 10.0f);
    CHECK(world.length() < 25.0f);

    // closed curve: s = 0 and s = L coincide
    float x0, y0, x1, y1;
    world.point_at(0.0f, &x0, &y0);
    world.point_at(world.length(), &x1, &y1);
    CHECK(std::hypot(x1 - x0, y1 - y0) < 1e-3f);

    // centerline points have (near) zero deviation and distance
    for (float s : {0.5f, 3.0f, 7.5f, 12.0f}) {
        float cx, cy;
        world.point_at(s, &cx, &cy);
        CHECK(world.deviation(cx, cy, s) < 1e-3f);
        CHECK(world.centerline_distance(cx, cy) < 0.08f);  // grid resolution bound
    }

    // windowed nearest stays on the local branch through the crossing
    const float s_far = world.length() * 0.5f;
    float fx, fy;
    world.point_at(s_far, &fx, &fy);
    const float s_back = world.nearest_s(fx, fy, s_far);
    CHECK(std::abs(s_back - s_far) < 0.1f);
}

TEST_CASE("rendering determinism and the style gap") {
    WorldConfig cfg;
    TrackWorld sim(cfg, WorldStyle::Sim);
    TrackWorld real(cfg, WorldStyle::Real);

    VehicleState st;
    st.x = 0.5f;
    st.y = -1.0f;
    st.heading = 1.0f;

    auto f1 = render_frame(sim, st, WorldStyle::Sim, 64, 42);
    auto f2 = render_frame(sim, st, WorldStyle::Sim, 64, 42);
    CHECK(f1.px == f2.px);

    auto fr = render_frame(real, st, WorldStyle::Real, 64, 42);
    CHECK(image_abs_diff(f1, fr) > 0.01);

    // values stay in range
    for (float v : fr.px) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("expert data collection") {
    WorldConfig cfg;
    TrackWorld world(cfg, WorldStyle::Sim);
    Rng rng(7);

    ExpertConfig ecfg;
    ecfg.image_size = 32;  // cheaper frames, command stream is unchanged
    auto data = collect_expert_data(world, 5, rng, ecfg);

    // 5 laps land in the contracted sample range
    CHECK(data.size() >= 1500);
    CHECK(data.size() <= 2000);

    // all commands within bounds
    for (const auto& s : data) {
        CHECK(s.steering >= -1.0f);
        CHECK(s.steering <= 1.0f);
        CHECK(s.throttle >= 0.0f);
        CHECK(s.throttle <= 1.0f);
        CHECK(s.frame.h == 32);
    }

    // balancing: max steering bin at most 3x the median bin
    const int bins = ecfg.balance_bins;
    std::vector<int> hist(bins, 0);
    for (const auto& s : data) {
        int b = static_cast<int>((std::clamp(s.steering, -1.0f, 1.0f) + 1.0f) / 2.0f * bins);
        hist[std::clamp(b, 0, bins - 1)]++;
    }
    std::vector<int> nonempty;
    for (int h : hist)
        if (h > 0) nonempty.push_back(h);
    std::sort(nonempty.begin(), nonempty.end());
    const int median = nonempty[nonempty.size() / 2];
    const int maxbin = nonempty.back();
    CHECK(maxbin <= 3 * median);

    TrackWorld realw(cfg, WorldStyle::Real);
    CHECK_THROWS_AS(collect_expert_data(realw, 1, rng, ecfg), UsageError);
}

TEST_CASE("bc policy shapes and training sanity") {
    Rng rng(8);
    BCPolicy policy;
    policy.init(32, rng);

    auto out = policy.forward(Tensor::randn({3, 3, 32, 32}, rng));
    CHECK(out.shape() == Shape{3, 2});

    Image frame(32, 32);
    for (auto& v : frame.px) v = static_cast<float>(rng.uniform(-1, 1));
    float steer = 0, throttle = 0;
    policy.predict(frame, &steer, &throttle);
    CHECK(steer >= -1.0f);
    CHECK(steer <= 1.0f);
    CHECK(throttle >= 0.0f);
    CHECK(throttle <= 1.0f);

    CHECK_THROWS_AS(train_bc(policy, {}, BCTrainConfig{}), UsageError);
}

TEST_CASE("closed loop logging and determinism") {
    WorldConfig cfg;
    TrackWorld world(cfg, WorldStyle::Sim);
    Rng rng(9);
    BCPolicy policy;
    policy.init(32, rng);  // untrained: enough to exercise the loop mechanics

    ClosedLoopConfig ccfg;
    ccfg.max_steps = 40;
    ccfg.image_size = 32;

    Rng e1(5), e2(5);
    auto log1 = run_closed_loop(world, policy, nullptr, e1, ccfg);
    auto log2 = run_closed_loop(world, policy, nullptr, e2, ccfg);
    CHECK(!log1.steps.empty());
    CHECK(log1.to_csv(false) == log2.to_csv(false));

    const auto csv = log1.to_csv();
    CHECK(csv.rfind("step,x,y,heading,steering,throttle,deviation,latency_ms\n", 0) == 0);

    // adapter hook runs per frame
    int calls = 0;
    auto adapter = [&calls](const Image& f, int) {
        ++calls;
        return f;
    };
    Rng e3(5);
    auto log3 = run_closed_loop(world, policy, adapter, e3, ccfg);
    CHECK(calls == static_cast<int>(log3.steps.size()));
}
