#include "s2rd/simworld.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "s2rd/optim.hpp"

namespace s2rd {

namespace {

constexpr float kPi = 3.14159265358979323846f;

float wrap_angle(float a) {
    while (a > kPi) a -= 2 * kPi;
    while (a < -kPi) a += 2 * kPi;
    return a;
}

std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a * 0x9e3779b97f4a7c15ull + b;
    return Rng::splitmix64(x);
}

float hash01(std::uint64_t a, std::uint64_t b) {
    return static_cast<float>(hash_mix(a, b) >> 11) * 0x1.0p-53f;
}

// hash-based value noise over a unit lattice, bilinear smoothing
float value_noise(float x, float y, std::uint64_t seed) {
    const float fx = std::floor(x), fy = std::floor(y);
    const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
    const float tx = x - fx, ty = y - fy;
    const float sx = tx * tx * (3 - 2 * tx);
    const float sy = ty * ty * (3 - 2 * ty);
    auto h = [seed](int gx, int gy) {
        return hash01(static_cast<std::uint64_t>(gx) * 0x100000001b3ull +
                          static_cast<std::uint64_t>(gy + 0x7fffffff),
                      seed);
    };
    const float v00 = h(ix, iy), v10 = h(ix + 1, iy), v01 = h(ix, iy + 1), v11 = h(ix + 1, iy + 1);
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy;
}

// ridge profile for folds/creases: bright thin streaks
float ridge_noise(float x, float y, std::uint64_t seed) {
    const float v = 1.0f - std::abs(2.0f * value_noise(x, y, seed) - 1.0f);
    return v * v * v * v;
}

struct Color {
    float r, g, b;
    Color operator*(float f) const { return {r * f, g * f, b * f}; }
    Color operator+(float f) const { return {r + f, g + f, b + f}; }
};

}  // namespace

WorldStyle world_style_from_string(const std::string& name) {
    if (name == "sim") return WorldStyle::Sim;
    if (name == "real") return WorldStyle::Real;
    throw ConfigError("unknown world style '" + name + "' (sim|real)");
}

// ---------------------------------------------------------------------------
// TrackWorld
// ---------------------------------------------------------------------------

TrackWorld::TrackWorld(const WorldConfig& cfg, WorldStyle style) : cfg_(cfg), style_(style) {
    // figure-8 centerline (Gerono lemniscate), closed and smooth
    const int n = 1024;
    px_.resize(n + 1);
    py_.resize(n + 1);
    ps_.resize(n + 1);
    float acc = 0;
    for (int i = 0; i <= n; ++i) {
        const float u = 2 * kPi * i / n;
        px_[i] = cfg.track_a * std::sin(u);
        py_[i] = 0.5f * cfg.track_b * std::sin(2 * u);
        if (i > 0)
            acc += std::hypot(px_[i] - px_[i - 1], py_[i] - py_[i - 1]);
        ps_[i] = acc;
    }
    length_ = acc;

    // distance field over the world box (distance + arclength of nearest point)
    grid_n_ = 288;
    const float margin = 1.0f;
    const float ext = std::max(cfg.wall_radius, std::max(cfg.track_a, 0.5f * cfg.track_b)) + margin;
    grid_x0_ = -ext;
    grid_y0_ = -ext;
    grid_step_ = 2 * ext / (grid_n_ - 1);
    grid_d_.resize(static_cast<size_t>(grid_n_) * grid_n_);
    grid_s_.resize(grid_d_.size());
#pragma omp parallel for schedule(static)
    for (int gy = 0; gy < grid_n_; ++gy) {
        for (int gx = 0; gx < grid_n_; ++gx) {
            const float wx = grid_x0_ + gx * grid_step_;
            const float wy = grid_y0_ + gy * grid_step_;
            float best = 1e30f, bests = 0;
            for (int i = 0; i < n; ++i) {
                // distance to segment i -> i+1
                const float ax = px_[i], ay = py_[i];
                const float bx = px_[i + 1], by = py_[i + 1];
                const float vx = bx - ax, vy = by - ay;
                const float len2 = vx * vx + vy * vy;
                float t = len2 > 0 ? ((wx - ax) * vx + (wy - ay) * vy) / len2 : 0.0f;
                t = std::clamp(t, 0.0f, 1.0f);
                const float dx = wx - (ax + t * vx), dy = wy - (ay + t * vy);
                const float d2 = dx * dx + dy * dy;
                if (d2 < best) {
                    best = d2;
                    bests = ps_[i] + t * (ps_[i + 1] - ps_[i]);
                }
            }
            grid_d_[static_cast<size_t>(gy) * grid_n_ + gx] = std::sqrt(best);
            grid_s_[static_cast<size_t>(gy) * grid_n_ + gx] = bests;
        }
    }
}

void TrackWorld::point_at(float s, float* x, float* y) const {
    float sm = std::fmod(s, length_);
    if (sm < 0) sm += length_;
    const auto it = std::upper_bound(ps_.begin(), ps_.end(), sm);
    const size_t i = std::min(ps_.size() - 1, static_cast<size_t>(it - ps_.begin()));
    const size_t i0 = i == 0 ? 0 : i - 1;
    const float seg = ps_[i] - ps_[i0];
    const float t = seg > 0 ? (sm - ps_[i0]) / seg : 0.0f;
    *x = px_[i0] + t * (px_[i] - px_[i0]);
    *y = py_[i0] + t * (py_[i] - py_[i0]);
}

float TrackWorld::heading_at(float s) const {
    float x0, y0, x1, y1;
    point_at(s, &x0, &y0);
    point_at(s + 0.05f, &x1, &y1);
    return std::atan2(y1 - y0, x1 - x0);
}

float TrackWorld::nearest_s(float x, float y, std::optional<float> s_hint, float window) const {
    const int n = static_cast<int>(px_.size()) - 1;
    float best = 1e30f, bests = 0;
    for (int i = 0; i < n; ++i) {
        if (s_hint) {
            // restrict to the local branch around the hint (handles the crossing)
            float ds = std::fmod(ps_[i] - *s_hint, length_);
            if (ds > length_ / 2) ds -= length_;
            if (ds < -length_ / 2) ds += length_;
            if (std::abs(ds) > window) continue;
        }
        const float ax = px_[i], ay = py_[i];
        const float bx = px_[i + 1], by = py_[i + 1];
        const float vx = bx - ax, vy = by - ay;
        const float len2 = vx * vx + vy * vy;
        float t = len2 > 0 ? ((x - ax) * vx + (y - ay) * vy) / len2 : 0.0f;
        t = std::clamp(t, 0.0f, 1.0f);
        const float dx = x - (ax + t * vx), dy = y - (ay + t * vy);
        const float d2 = dx * dx + dy * dy;
        if (d2 < best) {
            best = d2;
            bests = ps_[i] + t * (ps_[i + 1] - ps_[i]);
        }
    }
    return bests;
}

float TrackWorld::deviation(float x, float y, float s_hint) const {
    const float s = nearest_s(x, y, s_hint);
    float cx, cy;
    point_at(s, &cx, &cy);
    return std::hypot(x - cx, y - cy);
}

float TrackWorld::centerline_distance(float x, float y, float* s_along) const {
    const float gx = (x - grid_x0_) / grid_step_;
    const float gy = (y - grid_y0_) / grid_step_;
    const int ix = std::clamp(static_cast<int>(gx), 0, grid_n_ - 2);
    const int iy = std::clamp(static_cast<int>(gy), 0, grid_n_ - 2);
    const float tx = std::clamp(gx - ix, 0.0f, 1.0f);
    const float ty = std::clamp(gy - iy, 0.0f, 1.0f);
    auto at = [&](const std::vector<float>& g, int xx, int yy) {
        return g[static_cast<size_t>(yy) * grid_n_ + xx];
    };
    const float d = (at(grid_d_, ix, iy) * (1 - tx) + at(grid_d_, ix + 1, iy) * tx) * (1 - ty) +
                    (at(grid_d_, ix, iy + 1) * (1 - tx) + at(grid_d_, ix + 1, iy + 1) * tx) * ty;
    if (s_along) *s_along = at(grid_s_, ix, iy);  // nearest-cell arclength, good enough for dashes
    return d;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

Color ground_color(const TrackWorld& world, float wx, float wy, WorldStyle style,
                   const WorldConfig& cfg) {
    const std::uint64_t seed = cfg.style_seed;
    float s_along = 0;
    float d = world.centerline_distance(wx, wy, &s_along);

    if (style == WorldStyle::Real) {
        // wavy tissue edges: displace the road boundary along the track
        d += cfg.real_edge_wobble * (value_noise(s_along * 1.9f, 3.3f, seed + 1) - 0.5f) * 2.0f;
    }

    const bool on_road = d < cfg.half_width;
    if (on_road) {
        if (style == WorldStyle::Sim) {
            // black road with white lane markings and a crosswalk at the crossing
            Color c{0.055f, 0.055f, 0.06f};
            const bool near_crossing = wx * wx + wy * wy < 0.30f;
            if (near_crossing) {
                const float stripe = std::fmod(std::abs(wx - wy) * 9.0f, 2.0f);
                if (stripe < 0.9f) c = {0.92f, 0.92f, 0.92f};
            } else if (d < 0.035f && std::fmod(s_along, 0.60f) < 0.33f) {
                c = {0.95f, 0.95f, 0.95f};
            }
            return c;
        }
        // real: black tissues with texture, flat wavy edges and folds
        Color c{0.12f, 0.105f, 0.10f};
        const float tex =
            (value_noise(wx * 6.0f, wy * 6.0f, seed + 2) - 0.5f) * 2.0f * cfg.real_texture;
        c = c * (1.0f + 0.8f * tex);
        const float fold = ridge_noise(wx * 2.6f, wy * 2.6f, seed + 3) * cfg.real_fold;
        c = c + 0.45f * fold;
        return c;
    }

    if (style == WorldStyle::Sim) return {0.10f, 0.52f, 0.13f};  // green vinyl mat

    // real: green table cloth with creases and reflections
    Color c{0.15f, 0.43f, 0.12f};
    c = c * (1.0f + 0.35f * (value_noise(wx * 1.6f, wy * 1.6f, seed + 4) - 0.5f));
    const float crease = ridge_noise(wx * 1.3f + 5.0f, wy * 1.3f - 2.0f, seed + 5) * cfg.real_crease;
    c = c + 0.5f * crease;
    const float refl =
        std::max(0.0f, value_noise(wx * 0.8f + 9.0f, wy * 0.8f - 4.0f, seed + 6) - 0.55f) / 0.45f;
    c = c + cfg.real_reflection * 0.6f * refl;
    return c;
}

Color wall_color(float arc_pos, float z_frac, WorldStyle style, const WorldConfig& cfg) {
    const std::uint64_t seed = cfg.style_seed + 17;
    const float box_w = 0.45f;
    const float u = arc_pos / box_w;
    const std::int64_t idx = static_cast<std::int64_t>(std::floor(u));
    const float frac = u - std::floor(u);
    const float shade = hash01(static_cast<std::uint64_t>(idx + 1000003), seed);

    if (style == WorldStyle::Sim) {
        // white boxes, thin dark seams between them
        Color c{0.90f, 0.90f, 0.88f};
        c = c * (0.96f + 0.08f * shade);
        if (frac < 0.03f || frac > 0.97f) c = c * 0.6f;
        c = c * (0.88f + 0.18f * z_frac);
        return c;
    }
    // brown cardboard with damage, imprints and tape
    Color c{0.47f, 0.33f, 0.19f};
    c = c * (0.85f + 0.3f * shade);
    if (frac < 0.04f || frac > 0.96f) c = c * 0.55f;
    if (cfg.real_box_imprints) {
        if (hash01(static_cast<std::uint64_t>(idx * 3 + 7), seed) > 0.45f && frac > 0.25f &&
            frac < 0.75f && z_frac > 0.25f && z_frac < 0.62f)
            c = c * 0.55f;  // printed label / damage patch
        if (hash01(static_cast<std::uint64_t>(idx * 5 + 11), seed) > 0.5f && z_frac > 0.80f &&
            z_frac < 0.92f)
            c = c + 0.18f;  // packing tape stripe
    }
    c = c * (0.9f + 0.15f * z_frac);
    return c;
}

}  // namespace

Image render_frame(const TrackWorld& world, const VehicleState& state, WorldStyle style,
                   int image_size, std::uint64_t frame_seed) {
    const WorldConfig& cfg = world.config();
    const int W = image_size, H = image_size;
    Image img(H, W);

    const float fov = (style == WorldStyle::Sim ? cfg.sim_fov_deg : cfg.real_fov_deg) * kPi / 180.0f;
    const float tanx = std::tan(0.5f * fov);
    const float pitch = cfg.cam_pitch_deg * kPi / 180.0f;
    const float cpsi = std::cos(state.heading), spsi = std::sin(state.heading);
    // camera basis: forward tilted down, horizontal right, derived up
    const float fx = cpsi * std::cos(pitch), fy = spsi * std::cos(pitch), fz = -std::sin(pitch);
    const float rx = spsi, ry = -cpsi, rz = 0.0f;
    const float ux = cpsi * std::sin(pitch), uy = spsi * std::sin(pitch), uz = std::cos(pitch);

    const float exposure_gain =
        style == WorldStyle::Real
            ? cfg.real_exposure_gain * (0.98f + 0.04f * hash01(frame_seed, 99))
            : 1.0f;
    const float exposure_offset = style == WorldStyle::Real ? cfg.real_exposure_offset : 0.0f;

#pragma omp parallel for schedule(static)
    for (int py = 0; py < H; ++py) {
        for (int pxx = 0; pxx < W; ++pxx) {
            const float u = (2.0f * (pxx + 0.5f) / W - 1.0f) * tanx;
            const float v = (1.0f - 2.0f * (py + 0.5f) / H) * tanx;
            const float dx = fx + u * rx + v * ux;
            const float dy = fy + u * ry + v * uy;
            const float dz = fz + u * rz + v * uz;

            Color c{0.85f, 0.87f, 0.90f};  // sim sky
            if (style == WorldStyle::Real) c = {0.63f, 0.60f, 0.54f};

            // wall cylinder |p + t d| = R
            float t_wall = -1.0f;
            {
                const float a = dx * dx + dy * dy;
                const float bq = 2 * (state.x * dx + state.y * dy);
                const float cq =
                    state.x * state.x + state.y * state.y - cfg.wall_radius * cfg.wall_radius;
                const float disc = bq * bq - 4 * a * cq;
                if (a > 1e-9f && disc > 0) {
                    const float t = (-bq + std::sqrt(disc)) / (2 * a);
                    if (t > 0) t_wall = t;
                }
            }
            float t_ground = dz < -1e-6f ? cfg.cam_height / -dz : -1.0f;
            if (t_ground > 0 && t_wall > 0 && t_wall < t_ground) t_ground = -1.0f;

            if (t_ground > 0) {
                const float wx = state.x + dx * t_ground;
                const float wy = state.y + dy * t_ground;
                c = ground_color(world, wx, wy, style, cfg);
            } else if (t_wall > 0) {
                const float z_hit = cfg.cam_height + dz * t_wall;
                if (z_hit >= 0.0f && z_hit <= cfg.wall_height) {
                    const float hx = state.x + dx * t_wall, hy = state.y + dy * t_wall;
                    const float arc = std::atan2(hy, hx) * cfg.wall_radius;
                    c = wall_color(arc, z_hit / cfg.wall_height, style, cfg);
                }
            }

            float rgb[3] = {c.r, c.g, c.b};
            for (int ch = 0; ch < 3; ++ch) {
                float vch = rgb[ch] * exposure_gain + exposure_offset;
                if (style == WorldStyle::Real && cfg.real_grain > 0) {
                    // cheap deterministic grain: sum of hashes approximates a normal
                    const std::uint64_t pix =
                        (static_cast<std::uint64_t>(py) * W + pxx) * 3 + ch;
                    const float n = hash01(pix, frame_seed) + hash01(pix + 0x9e37ull, frame_seed) +
                                    hash01(pix + 0x7f4aull, frame_seed) - 1.5f;
                    vch += cfg.real_grain * 1.15f * n;
                }
                img.at(py, pxx, ch) = std::clamp(vch, 0.0f, 1.0f) * 2.0f - 1.0f;
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// vehicle
// ---------------------------------------------------------------------------

VehicleState step_vehicle(const VehicleState& state, float steering_cmd, float throttle, float dt,
                          const VehicleParams& params) {
    if (dt <= 0) throw UsageError("step_vehicle: dt must be positive");
    VehicleState s = state;
    const float delta = std::clamp(steering_cmd, -1.0f, 1.0f) * params.max_steer;
    s.steering = delta;
    const float omega = s.speed * std::tan(delta) / params.wheelbase;
    if (std::abs(omega) < 1e-7f) {
        s.x += s.speed * std::cos(s.heading) * dt;
        s.y += s.speed * std::sin(s.heading) * dt;
        s.heading = wrap_angle(s.heading + omega * dt);
    } else {
        // exact arc integration of the kinematic bicycle
        const float radius = s.speed / omega;
        const float h0 = s.heading, h1 = s.heading + omega * dt;
        s.x += radius * (std::sin(h1) - std::sin(h0));
        s.y += radius * (std::cos(h0) - std::cos(h1));
        s.heading = wrap_angle(h1);
    }
    const float v_cmd = std::clamp(throttle, 0.0f, 1.0f) * params.max_speed;
    s.speed = v_cmd + (s.speed - v_cmd) * std::exp(-dt / params.speed_tau);
    return s;
}

// ---------------------------------------------------------------------------
// expert + data collection
// ---------------------------------------------------------------------------

namespace {

void pure_pursuit(const TrackWorld& world, const VehicleState& st, float s_now,
                  const ExpertConfig& cfg, const VehicleParams& vp, float* steer_cmd,
                  float* throttle_cmd) {
    float tx, ty;
    world.point_at(s_now + cfg.lookahead, &tx, &ty);
    const float alpha = wrap_angle(std::atan2(ty - st.y, tx - st.x) - st.heading);
    const float delta =
        std::atan2(2.0f * vp.wheelbase * std::sin(alpha), cfg.lookahead);
    *steer_cmd = std::clamp(delta / vp.max_steer, -1.0f, 1.0f);
    const float v_err = cfg.target_speed - st.speed;
    *throttle_cmd = std::clamp(cfg.target_speed / vp.max_speed + 0.8f * v_err / vp.max_speed,
                               0.0f, 1.0f);
}

std::vector<DriveSample> balance_by_steering(std::vector<DriveSample> samples, int bins,
                                             float cap_ratio, Rng& rng) {
    std::vector<std::vector<size_t>> by_bin(bins);
    for (size_t i = 0; i < samples.size(); ++i) {
        const float st = std::clamp(samples[i].steering, -1.0f, 1.0f);
        int b = static_cast<int>((st + 1.0f) / 2.0f * bins);
        b = std::clamp(b, 0, bins - 1);
        by_bin[b].push_back(i);
    }
    std::vector<size_t> nonempty;
    for (const auto& v : by_bin)
        if (!v.empty()) nonempty.push_back(v.size());
    std::sort(nonempty.begin(), nonempty.end());
    const size_t median = nonempty[nonempty.size() / 2];
    const size_t cap = std::max<size_t>(1, static_cast<size_t>(cap_ratio * median));

    std::vector<size_t> keep;
    for (auto& bin : by_bin) {
        if (bin.size() > cap) {
            // deterministic downsample: seeded Fisher-Yates, then keep the head
            for (size_t i = bin.size() - 1; i > 0; --i)
                std::swap(bin[i], bin[rng.next_below(i + 1)]);
            bin.resize(cap);
        }
        keep.insert(keep.end(), bin.begin(), bin.end());
    }
    std::sort(keep.begin(), keep.end());  // restore chronological order
    std::vector<DriveSample> out;
    out.reserve(keep.size());
    for (size_t i : keep) out.push_back(std::move(samples[i]));
    return out;
}

}  // namespace

std::vector<DriveSample> collect_expert_data(const TrackWorld& world, int n_laps, Rng& rng,
                                             const ExpertConfig& cfg) {
    if (world.style() != WorldStyle::Sim)
        throw UsageError("collect_expert_data requires the sim-style world");
    if (n_laps < 1) throw UsageError("collect_expert_data: need at least one lap");

    VehicleParams vp;
    VehicleState st;
    float s_now = 0.2f;
    world.point_at(s_now, &st.x, &st.y);
    st.heading = world.heading_at(s_now);

    const float target = n_laps * world.length();
    const int max_steps =
        static_cast<int>(3.0f * target / (cfg.target_speed * cfg.dt)) + 400;
    float progress = 0;
    std::vector<DriveSample> raw;

    for (int step = 0; step < max_steps && progress < target; ++step) {
        float steer_cmd = 0, throttle_cmd = 0;
        pure_pursuit(world, st, s_now, cfg, vp, &steer_cmd, &throttle_cmd);
        steer_cmd = std::clamp(steer_cmd + cfg.steer_noise * rng.normal_f(), -1.0f, 1.0f);

        DriveSample sample;
        sample.frame = render_frame(world, st, WorldStyle::Sim, cfg.image_size, rng.next_u64());
        sample.steering = steer_cmd;
        sample.throttle = throttle_cmd;
        raw.push_back(std::move(sample));

        st = step_vehicle(st, steer_cmd, throttle_cmd, cfg.dt, vp);
        const float s_new = world.nearest_s(st.x, st.y, s_now);
        float ds = std::fmod(s_new - s_now, world.length());
        if (ds > world.length() / 2) ds -= world.length();
        if (ds < -world.length() / 2) ds += world.length();
        progress += ds;
        s_now = s_new;

        if (world.deviation(st.x, st.y, s_now) > world.config().half_width)
            throw TrainingError("expert left the road during collection (tuning bug)");
    }
    if (progress < target)
        throw TrainingError("expert did not finish the requested laps within the step budget");

    return balance_by_steering(std::move(raw), cfg.balance_bins, cfg.balance_cap_ratio, rng);
}

// ---------------------------------------------------------------------------
// behavioral cloning policy
// ---------------------------------------------------------------------------

namespace {

Tensor conv_weight(int oc, int ic, int k, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(ic * k * k));
    return Tensor::randn({oc, ic, k, k}, rng, s, true);
}

Tensor dense_weight(int out, int in, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(in));
    return Tensor::randn({out, in}, rng, s, true);
}

Tensor zeros_param(const Shape& s) {
    auto t = Tensor::zeros(s);
    t.set_requires_grad(true);
    return t;
}

}  // namespace

void BCPolicy::init(int image_size, Rng& rng) {
    image_size_ = image_size;
    const int widths[4] = {16, 24, 32, 48};
    const int kernels[4] = {5, 5, 3, 3};
    conv_w_.clear();
    conv_b_.clear();
    int in = 3;
    for (int i = 0; i < 4; ++i) {
        conv_w_.push_back(conv_weight(widths[i], in, kernels[i], rng));
        conv_b_.push_back(zeros_param({widths[i]}));
        in = widths[i];
    }
    const int spatial = image_size / 16;  // four stride-2 convs
    const int flat = 48 * spatial * spatial;
    fc1_w = dense_weight(64, flat, rng);
    fc1_b = zeros_param({64});
    fc2_w = dense_weight(2, 64, rng);
    fc2_b = zeros_param({2});
}

Tensor BCPolicy::forward(const Tensor& frames) const {
    if (frames.rank() != 4 || frames.dim(1) != 3 || frames.dim(2) != image_size_ ||
        frames.dim(3) != image_size_)
        throw ShapeError("policy expects [B,3," + std::to_string(image_size_) + "," +
                         std::to_string(image_size_) + "], got " + shape_str(frames.shape()));
    Tensor h = frames;
    for (size_t i = 0; i < conv_w_.size(); ++i) {
        const int k = conv_w_[i].dim(2);
        h = silu(conv2d(h, conv_w_[i], conv_b_[i], 2, k / 2));
    }
    const int B = frames.dim(0);
    h = silu(linear(reshape(h, {B, static_cast<int>(h.numel() / B)}), fc1_w, fc1_b));
    // pre-activation outputs; predict() maps them through tanh/sigmoid
    return linear(h, fc2_w, fc2_b);
}

void BCPolicy::predict(const Image& frame, float* steering, float* throttle) const {
    NoGradGuard ng;
    auto out = forward(image_to_tensor(frame));
    *steering = std::tanh(out.data()[0]);
    *throttle = 1.0f / (1.0f + std::exp(-out.data()[1]));
}

void BCPolicy::collect(std::vector<Tensor>& out) const {
    for (size_t i = 0; i < conv_w_.size(); ++i) {
        out.push_back(conv_w_[i]);
        out.push_back(conv_b_[i]);
    }
    for (const Tensor& t : {fc1_w, fc1_b, fc2_w, fc2_b}) out.push_back(t);
}

void BCPolicy::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "meta", Tensor::from_data({1}, {static_cast<float>(image_size_)}));
    for (size_t i = 0; i < conv_w_.size(); ++i) {
        ck.put(prefix + "conv" + std::to_string(i) + "_w", conv_w_[i]);
        ck.put(prefix + "conv" + std::to_string(i) + "_b", conv_b_[i]);
    }
    ck.put(prefix + "fc1_w", fc1_w);
    ck.put(prefix + "fc1_b", fc1_b);
    ck.put(prefix + "fc2_w", fc2_w);
    ck.put(prefix + "fc2_b", fc2_b);
}

void BCPolicy::load(const Checkpoint& ck, const std::string& prefix) {
    image_size_ = static_cast<int>(ck.get(prefix + "meta").data()[0]);
    conv_w_.resize(4);
    conv_b_.resize(4);
    for (int i = 0; i < 4; ++i) {
        conv_w_[i] = ck.get(prefix + "conv" + std::to_string(i) + "_w", true);
        conv_b_[i] = ck.get(prefix + "conv" + std::to_string(i) + "_b", true);
    }
    fc1_w = ck.get(prefix + "fc1_w", true);
    fc1_b = ck.get(prefix + "fc1_b", true);
    fc2_w = ck.get(prefix + "fc2_w", true);
    fc2_b = ck.get(prefix + "fc2_b", true);
}

std::vector<std::pair<int, float>> train_bc(BCPolicy& policy,
                                            const std::vector<DriveSample>& dataset,
                                            const BCTrainConfig& cfg) {
    if (dataset.size() < 500)
        throw UsageError("train_bc: need at least 500 samples, got " +
                         std::to_string(dataset.size()));
    Rng rng = Rng(cfg.seed).substream("bc-train");

    std::vector<Tensor> params;
    policy.collect(params);
    Adam opt(Adam::Options{.lr = cfg.lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f});
    opt.add_params(params);

    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<std::pair<int, float>> curve;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.next_below(i + 1)]);
        for (size_t off = 0; off + cfg.batch <= order.size(); off += cfg.batch) {
            std::vector<Image> frames;
            std::vector<float> targets;
            for (int b = 0; b < cfg.batch; ++b) {
                const auto& s = dataset[order[off + b]];
                frames.push_back(s.frame);
                // pre-activation targets: atanh/logit of the bounded commands
                const float st = std::clamp(s.steering, -0.999f, 0.999f);
                const float th = std::clamp(s.throttle, 0.001f, 0.999f);
                targets.push_back(0.5f * std::log((1 + st) / (1 - st)));
                targets.push_back(std::log(th / (1 - th)));
            }
            opt.zero_grad();
            auto out = policy.forward(images_to_tensor(frames));
            auto loss = mse(out, Tensor::from_data({cfg.batch, 2}, targets));
            const float lv = loss.item();
            if (!std::isfinite(lv))
                throw TrainingError("behavioral cloning diverged at step " + std::to_string(step));
            backward(loss);
            opt.step();
            curve.emplace_back(step++, lv);
        }
    }
    return curve;
}

// ---------------------------------------------------------------------------
// closed loop
// ---------------------------------------------------------------------------

std::string EpisodeLog::to_csv(bool include_latency) const {
    std::string out = include_latency ? "step,x,y,heading,steering,throttle,deviation,latency_ms\n"
                                      : "step,x,y,heading,steering,throttle,deviation\n";
    char buf[200];
    for (const auto& s : steps) {
        if (include_latency)
            std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.3f\n", s.step,
                          static_cast<double>(s.x), static_cast<double>(s.y),
                          static_cast<double>(s.heading), static_cast<double>(s.steering),
                          static_cast<double>(s.throttle), static_cast<double>(s.deviation),
                          s.latency_ms);
        else
            std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n", s.step,
                          static_cast<double>(s.x), static_cast<double>(s.y),
                          static_cast<double>(s.heading), static_cast<double>(s.steering),
                          static_cast<double>(s.throttle), static_cast<double>(s.deviation));
        out += buf;
    }
    return out;
}

void EpisodeLog::save_csv(const std::string& path) const {
    const std::string text = to_csv();
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

EpisodeLog run_closed_loop(const TrackWorld& world, const BCPolicy& policy,
                           const FrameAdapter& adapter, Rng& rng, const ClosedLoopConfig& cfg) {
    VehicleParams vp;
    VehicleState st;
    float s_now = cfg.start_s;
    world.point_at(s_now, &st.x, &st.y);
    st.heading = world.heading_at(s_now);

    EpisodeLog log;
    float progress = 0;
    for (int step = 0; step < cfg.max_steps; ++step) {
        Image frame = render_frame(world, st, world.style(), cfg.image_size, rng.next_u64());
        const auto t0 = std::chrono::steady_clock::now();
        if (adapter) frame = adapter(frame, step);
        float steer = 0, throttle = 0;
        policy.predict(frame, &steer, &throttle);
        const auto t1 = std::chrono::steady_clock::now();

        if (cfg.frame_dump_stride > 0 && step % cfg.frame_dump_stride == 0 &&
            !cfg.frame_dump_dir.empty()) {
            char name[64];
            std::snprintf(name, sizeof(name), "/frame_%05d.png", step);
            write_png(cfg.frame_dump_dir + name, frame);
        }

        EpisodeStep row;
        row.step = step;
        row.x = st.x;
        row.y = st.y;
        row.heading = st.heading;
        row.steering = steer;
        row.throttle = throttle;
        row.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

        st = step_vehicle(st, steer, throttle, cfg.dt, vp);
        const float s_new = world.nearest_s(st.x, st.y, s_now);
        float ds = std::fmod(s_new - s_now, world.length());
        if (ds > world.length() / 2) ds -= world.length();
        if (ds < -world.length() / 2) ds += world.length();
        progress += ds;
        s_now = s_new;

        row.deviation = world.deviation(st.x, st.y, s_now);
        log.steps.push_back(row);

        if (row.deviation > world.config().half_width) {
            log.off_track_step = step;
            break;
        }
    }
    log.progress = progress;
    log.laps_completed = static_cast<int>(std::floor(progress / world.length()));
    return log;
}

}  // namespace s2rd
