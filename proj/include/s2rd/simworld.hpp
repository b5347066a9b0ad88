#ifndef S2RD_SIMWORLD_HPP
#define S2RD_SIMWORLD_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "s2rd/checkpoint.hpp"
#include "s2rd/image.hpp"
#include "s2rd/rng.hpp"
#include "s2rd/tensor.hpp"

namespace s2rd {

enum class WorldStyle { Sim, Real };

WorldStyle world_style_from_string(const std::string& name);

// Style and geometry knobs, all exposed under world.* in the config. The
// "real" degradation channels are the synthetic stand-ins for the paper-style
// physical gap: cloth creases, tissue folds, reflections, grain, exposure and
// a narrower FOV.
struct WorldConfig {
    float track_a = 2.5f;       // figure-8 extent in x
    float track_b = 2.8f;       // figure-8 extent in y (lobe height)
    float half_width = 0.45f;   // road half-width (m)
    float wall_radius = 4.1f;   // box ring distance from origin
    float wall_height = 0.5f;
    float cam_height = 0.12f;
    float cam_pitch_deg = 12.0f;
    float sim_fov_deg = 100.0f;
    float real_fov_deg = 78.0f;
    float real_grain = 0.10f;
    float real_exposure_gain = 0.72f;
    float real_exposure_offset = -0.06f;
    float real_texture = 0.45f;      // road texture noise amplitude
    float real_fold = 0.55f;         // tissue fold streaks on the road
    float real_crease = 0.60f;       // table-cloth creases on the mat
    float real_reflection = 0.55f;   // broad highlight bands
    float real_edge_wobble = 0.10f;  // road edge displacement (m)
    bool real_box_imprints = true;
    std::uint64_t style_seed = 1234;  // fixed per-world texture phase
};

// Figure-8 centerline with arclength parameterization and a precomputed
// distance field for rendering and lateral-deviation queries.
class TrackWorld {
public:
    TrackWorld(const WorldConfig& cfg, WorldStyle style);

    const WorldConfig& config() const { return cfg_; }
    WorldStyle style() const { return style_; }
    float length() const { return length_; }

    // closed C1 centerline
    void point_at(float s, float* x, float* y) const;
    float heading_at(float s) const;

    // arclength of the nearest centerline point; window keeps the query on
    // the local branch through the figure-8 crossing
    float nearest_s(float x, float y, std::optional<float> s_hint = std::nullopt,
                    float window = 1.5f) const;
    float deviation(float x, float y, float s_hint) const;

    // signed distance to the road centerline (unsigned distance, meters)
    float centerline_distance(float x, float y, float* s_along = nullptr) const;

private:
    WorldConfig cfg_;
    WorldStyle style_;
    std::vector<float> px_, py_, ps_;  // polyline and cumulative arclength
    float length_ = 0;
    // distance-field grid over the world bounding box
    int grid_n_ = 0;
    float grid_x0_ = 0, grid_y0_ = 0, grid_step_ = 0;
    std::vector<float> grid_d_, grid_s_;
};

struct VehicleState {
    float x = 0, y = 0;
    float heading = 0;   // rad
    float speed = 0;     // m/s
    float steering = 0;  // rad, actual wheel angle
};

struct VehicleParams {
    float wheelbase = 0.25f;
    float max_steer = 0.50f;  // rad
    float max_speed = 1.2f;   // m/s
    float speed_tau = 0.4f;   // first-order throttle response
};

// Kinematic bicycle step with exact arc integration; steering_cmd in [-1,1],
// throttle in [0,1].
VehicleState step_vehicle(const VehicleState& state, float steering_cmd, float throttle, float dt,
                          const VehicleParams& params = {});

// Forward camera view: ground-plane projection of the track texture below the
// horizon, box walls above it. Real style adds the degradation channels with
// per-frame seeded grain/exposure.
Image render_frame(const TrackWorld& world, const VehicleState& state, WorldStyle style,
                   int image_size, std::uint64_t frame_seed);

struct DriveSample {
    Image frame;     // 64x64x3 in [-1,1]
    float steering;  // [-1,1]
    float throttle;  // [0,1]
};

struct ExpertConfig {
    float dt = 0.05f;
    float target_speed = 0.9f;
    float lookahead = 0.55f;
    float steer_noise = 0.04f;
    int image_size = 64;
    int balance_bins = 15;
    float balance_cap_ratio = 3.0f;  // max bin <= ratio * median bin
};

// Scripted pure-pursuit expert with seeded steering noise; collects n_laps of
// (frame, command) pairs in the sim style, then balances by steering-bin
// downsampling. Frames are already normalized to [-1,1]; no augmentation.
std::vector<DriveSample> collect_expert_data(const TrackWorld& world, int n_laps, Rng& rng,
                                             const ExpertConfig& cfg = {});

// Six-layer CNN (4 conv + 2 dense) predicting (steering, throttle).
class BCPolicy {
public:
    void init(int image_size, Rng& rng);

    // frames [B,3,H,W] -> [B,2]: column 0 steering in (-1,1), column 1 throttle in (0,1)
    Tensor forward(const Tensor& frames) const;
    void predict(const Image& frame, float* steering, float* throttle) const;

    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);

private:
    int image_size_ = 64;
    std::vector<Tensor> conv_w_, conv_b_;
    Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

struct BCTrainConfig {
    int epochs = 4;
    float lr = 1e-3f;
    int batch = 32;
    std::uint64_t seed = 0;
};

// Behavioral cloning on expert samples; returns per-step loss curve.
std::vector<std::pair<int, float>> train_bc(BCPolicy& policy,
                                            const std::vector<DriveSample>& dataset,
                                            const BCTrainConfig& cfg);

struct EpisodeStep {
    int step = 0;
    float x = 0, y = 0, heading = 0;
    float steering = 0, throttle = 0;
    float deviation = 0;
    double latency_ms = 0;
};

struct EpisodeLog {
    std::vector<EpisodeStep> steps;
    std::optional<int> off_track_step;
    int laps_completed = 0;
    float progress = 0;  // unwrapped arclength progress (m)

    // CSV: step,x,y,heading,steering,throttle,deviation,latency_ms
    std::string to_csv(bool include_latency = true) const;
    void save_csv(const std::string& path) const;
};

// Optional perception adapter applied to each rendered frame before the
// policy sees it (the sim2real diffusion hook).
using FrameAdapter = std::function<Image(const Image& frame, int step)>;

struct ClosedLoopConfig {
    int max_steps = 900;
    float dt = 0.05f;
    int image_size = 64;
    float start_s = 0.3f;
    int frame_dump_stride = 0;  // 0 = no dumps
    std::string frame_dump_dir;
};

EpisodeLog run_closed_loop(const TrackWorld& world, const BCPolicy& policy,
                           const FrameAdapter& adapter, Rng& rng, const ClosedLoopConfig& cfg);

}  // namespace s2rd

#endif
