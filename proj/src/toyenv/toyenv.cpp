#include "jointdyn/toyenv.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <limits>
#include <stdexcept>

#include "jointdyn/io.hpp"

namespace jointdyn::toyenv {

std::string game_name(Game g) { return g == Game::crossing ? "crossing" : "hunter"; }

Game parse_game(const std::string& name) {
  if (name == "crossing") return Game::crossing;
  if (name == "hunter") return Game::hunter;
  throw std::invalid_argument("unknown game '" + name + "'");
}

void EnvConfig::validate() const {
  if (grid_rows < 3 || grid_cols < 3) throw std::invalid_argument("grid needs at least 3 rows and columns");
  if (resolution % grid_rows != 0 || resolution % grid_cols != 0 || resolution / grid_rows != resolution / grid_cols) {
    throw std::invalid_argument("resolution must be a common multiple of square grid cells");
  }
  if (cell() < 2) throw std::invalid_argument("grid cells must be at least 2 pixels");
  if (!(spawn_probability >= 0.0 && spawn_probability <= 1.0)) {
    throw std::invalid_argument("spawn_probability must lie in [0,1]");
  }
  if (episode_length < 1) throw std::invalid_argument("episode_length must be positive");
}

std::map<std::string, std::string> EnvConfig::describe() const {
  return {{"game", game_name(game)},
          {"grid_rows", std::to_string(grid_rows)},
          {"grid_cols", std::to_string(grid_cols)},
          {"resolution", std::to_string(resolution)},
          {"spawn_probability", std::to_string(spawn_probability)},
          {"max_objects", std::to_string(max_objects)},
          {"cars_per_lane", std::to_string(cars_per_lane)},
          {"episode_length", std::to_string(episode_length)}};
}

namespace {

constexpr std::array<int, 6> kLanePeriods{1, 2, 1, 3, 2, 1};

int cell_px(const EnvConfig& c) { return static_cast<int>(c.cell()); }
int res_px(const EnvConfig& c) { return static_cast<int>(c.resolution); }
int crossing_start_y(const EnvConfig& c) { return static_cast<int>((c.grid_rows - 1) * c.cell()); }
int car_width(const EnvConfig& c) { return cell_px(c) + cell_px(c) / 2; }

int wrap(int x, int n) { return ((x % n) + n) % n; }

bool car_hits(const EnvConfig& c, const Car& car, int ax, int ay) {
  const int cell = cell_px(c);
  const int top = car.lane * cell;
  if (!(ay < top + cell && ay + cell > top)) return false;
  for (int px = ax; px < ax + cell; ++px) {
    if (wrap(px - car.x, res_px(c)) < car_width(c)) return true;
  }
  return false;
}

bool overlaps(int ax, int ay, int bx, int by, int size) {
  return std::abs(ax - bx) < size && std::abs(ay - by) < size;
}

bool in_tag_range(const EnvConfig& c, const EnvState& s, const Prey& p) {
  const int cell = cell_px(c);
  return std::abs(p.x - s.agent_x) <= 3 * cell && std::abs(p.y - s.agent_y) <= cell;
}

struct Outcome {
  int reward = 0;
  bool collided = false;
};

Outcome advance_crossing(const EnvConfig& c, EnvState& s, std::uint8_t action) {
  Outcome out;
  for (auto& car : s.cars) {
    if (s.step % static_cast<std::uint64_t>(car.period) == 0) car.x = wrap(car.x + car.dir, res_px(c));
  }
  const int start = crossing_start_y(c);
  if (action == kUp) s.agent_y -= 1;
  if (action == kDown) s.agent_y = std::min(start, s.agent_y + 1);
  for (const auto& car : s.cars) {
    if (car_hits(c, car, s.agent_x, s.agent_y)) {
      out.collided = true;
      s.agent_y = std::min(start, s.agent_y + cell_px(c));
      break;
    }
  }
  if (s.agent_y <= 0) {
    out.reward = 1;
    s.agent_y = start;
  }
  return out;
}

Outcome advance_hunter(const EnvConfig& c, EnvState& s, std::uint8_t action) {
  Outcome out;
  const int cell = cell_px(c);
  const int hi = res_px(c) - cell;
  switch (action) {
    case kMoveUp: s.agent_y = std::max(0, s.agent_y - 1); break;
    case kMoveDown: s.agent_y = std::min(hi, s.agent_y + 1); break;
    case kMoveLeft: s.agent_x = std::max(0, s.agent_x - 1); break;
    case kMoveRight: s.agent_x = std::min(hi, s.agent_x + 1); break;
    default: break;
  }
  if (s.step % 2 == 0) {
    for (auto& p : s.prey) p.x += p.dir;
    std::erase_if(s.prey, [&](const Prey& p) { return p.x < 0 || p.x > hi; });
  }
  if (s.step % static_cast<std::uint64_t>(cell) == 0 && s.prey.size() < c.max_objects &&
      c.spawn_probability > 0.0 && s.rng.bernoulli(c.spawn_probability)) {
    Prey p;
    p.y = static_cast<int>(s.rng.index(c.grid_rows)) * cell;
    const bool from_left = s.rng.bernoulli(0.5);
    p.x = from_left ? 0 : hi;
    p.dir = from_left ? 1 : -1;
    s.prey.push_back(p);
  }
  if (action == kTag) {
    const auto before = s.prey.size();
    std::erase_if(s.prey, [&](const Prey& p) { return in_tag_range(c, s, p); });
    out.reward += static_cast<int>(before - s.prey.size());
  }
  const auto before = s.prey.size();
  std::erase_if(s.prey, [&](const Prey& p) { return overlaps(p.x, p.y, s.agent_x, s.agent_y, cell); });
  if (s.prey.size() != before) {
    out.collided = true;
    out.reward -= static_cast<int>(before - s.prey.size());
  }
  return out;
}

Outcome advance(const EnvConfig& c, EnvState& s, std::uint8_t action) {
  if (action >= c.num_actions()) {
    throw std::invalid_argument("illegal action " + std::to_string(action) + " for " + game_name(c.game));
  }
  Outcome out = c.game == Game::crossing ? advance_crossing(c, s, action) : advance_hunter(c, s, action);
  s.step += 1;
  return out;
}

void fill_box(std::vector<std::uint8_t>& f, int res, int x0, int y0, int w, int h, std::uint8_t level) {
  for (int y = std::max(0, y0); y < std::min(res, y0 + h); ++y) {
    for (int x = std::max(0, x0); x < std::min(res, x0 + w); ++x) f[static_cast<std::size_t>(y * res + x)] = level;
  }
}

}  // namespace

EnvState reset(const EnvConfig& config, std::uint64_t seed) {
  config.validate();
  EnvState s;
  s.rng = Rng(seed);
  const int cell = cell_px(config);
  s.agent_x = static_cast<int>(config.grid_cols / 2) * cell;
  if (config.game == Game::crossing) {
    s.agent_y = crossing_start_y(config);
    const int res = res_px(config);
    for (std::size_t lane = 1; lane + 1 < config.grid_rows; ++lane) {
      const int offset = static_cast<int>(s.rng.index(static_cast<std::uint64_t>(res)));
      for (std::size_t k = 0; k < config.cars_per_lane; ++k) {
        Car car;
        car.lane = static_cast<int>(lane);
        car.dir = lane % 2 == 1 ? 1 : -1;
        car.period = kLanePeriods[(lane - 1) % kLanePeriods.size()];
        car.x = wrap(offset + static_cast<int>(k) * res / static_cast<int>(config.cars_per_lane), res);
        s.cars.push_back(car);
      }
    }
  } else {
    s.agent_y = static_cast<int>(config.grid_rows / 2) * cell;
  }
  return s;
}

std::vector<std::uint8_t> render(const EnvConfig& config, const EnvState& state) {
  const int res = res_px(config);
  const int cell = cell_px(config);
  std::vector<std::uint8_t> f(config.resolution * config.resolution, 0);
  if (config.game == Game::crossing) {
    fill_box(f, res, 0, 0, res, cell, kGoalLevel);
    for (const auto& car : state.cars) {
      for (int dx = 0; dx < car_width(config); ++dx) {
        const int x = wrap(car.x + dx, res);
        for (int y = car.lane * cell; y < car.lane * cell + cell; ++y) f[static_cast<std::size_t>(y * res + x)] = kCarLevel;
      }
    }
  } else {
    for (const auto& p : state.prey) fill_box(f, res, p.x, p.y, cell, cell, kPreyLevel);
  }
  fill_box(f, res, state.agent_x, state.agent_y, cell, cell, kAgentLevel);
  return f;
}

StepResult step(const EnvConfig& config, EnvState& state, std::uint8_t action) {
  const Outcome o = advance(config, state, action);
  return {render(config, state), o.reward};
}

std::pair<int, int> agent_cell(const EnvConfig& config, const EnvState& state) {
  const int cell = cell_px(config);
  return {state.agent_y / cell, state.agent_x / cell};
}

void ScriptedAgent::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("agent epsilon must lie in [0,1]");
}

namespace {

bool window_collides(const EnvConfig& c, const EnvState& s, std::uint8_t action, std::size_t frames) {
  EnvState probe = s;
  for (std::size_t i = 0; i < frames; ++i) {
    if (advance(c, probe, action).collided) return true;
  }
  return false;
}

std::uint8_t greedy_crossing(const EnvConfig& c, const EnvState& s, std::size_t frame_skip) {
  if (!window_collides(c, s, kUp, frame_skip)) return kUp;
  if (!window_collides(c, s, kNoop, frame_skip)) return kNoop;
  return kDown;
}

std::uint8_t greedy_hunter(const EnvConfig& c, const EnvState& s) {
  const Prey* target = nullptr;
  int best = std::numeric_limits<int>::max();
  for (const auto& p : s.prey) {
    if (in_tag_range(c, s, p)) return kTag;
    const int d = std::abs(p.x - s.agent_x) + std::abs(p.y - s.agent_y);
    if (d < best) {
      best = d;
      target = &p;
    }
  }
  const int cell = cell_px(c);
  const int tx = target ? target->x : static_cast<int>(c.grid_cols / 2) * cell;
  const int ty = target ? target->y : static_cast<int>(c.grid_rows / 2) * cell;
  if (ty < s.agent_y) return kMoveUp;
  if (ty > s.agent_y) return kMoveDown;
  if (tx < s.agent_x) return kMoveLeft;
  if (tx > s.agent_x) return kMoveRight;
  return kTag;
}

}  // namespace

std::uint8_t ScriptedAgent::act(const EnvConfig& config, const EnvState& state, std::size_t frame_skip,
                                Rng& rng) const {
  if (policy == Policy::epsilon_greedy_path && rng.bernoulli(epsilon)) {
    return static_cast<std::uint8_t>(rng.index(config.num_actions()));
  }
  return config.game == Game::crossing ? greedy_crossing(config, state, frame_skip) : greedy_hunter(config, state);
}

std::vector<datapipe::RawEpisode> generate_dataset(const EnvConfig& config, const ScriptedAgent& agent,
                                                   std::size_t num_steps, std::uint64_t seed, std::size_t frame_skip) {
  config.validate();
  agent.validate();
  if (frame_skip < 1) throw std::invalid_argument("frame_skip must be >= 1");
  Rng master(seed);
  Rng agent_rng(master.derive(1));
  std::vector<datapipe::RawEpisode> out;
  std::size_t produced = 0;
  std::uint64_t episode = 0;
  while (produced < num_steps) {
    EnvState s = reset(config, master.derive(100 + episode++));
    datapipe::RawEpisode ep;
    ep.height = ep.width = config.resolution;
    ep.num_actions = config.num_actions();
    std::vector<std::uint8_t> frame = render(config, s);
    std::uint8_t action = 0;
    const std::size_t len = std::min(config.episode_length, num_steps - produced);
    for (std::size_t j = 0; j < len; ++j) {
      if (j % frame_skip == 0) action = agent.act(config, s, frame_skip, agent_rng);
      StepResult r = step(config, s, action);
      ep.frames.push_back(std::move(frame));
      ep.actions.push_back(action);
      ep.rewards.push_back(r.reward);
      frame = std::move(r.frame);
    }
    produced += len;
    out.push_back(std::move(ep));
  }
  return out;
}

GameData make_game_data(const EnvConfig& config, const ScriptedAgent& agent, std::size_t num_steps,
                        std::uint64_t seed, double test_fraction, std::size_t frame_skip) {
  std::vector<datapipe::DecimatedEpisode> episodes;
  for (const auto& raw : generate_dataset(config, agent, num_steps, seed, frame_skip)) {
    episodes.push_back(datapipe::skip_and_accumulate(raw, frame_skip));
  }
  auto [train, test] = datapipe::split_train_test(std::move(episodes), test_fraction, Rng(seed).derive(2));
  const auto mean = datapipe::compute_mean_image(train);
  GameData data{datapipe::build_dataset(train, mean, game_name(config.game), "train", seed),
                datapipe::build_dataset(test, mean, game_name(config.game), "test", seed)};
  auto env = config.describe();
  env["frame_skip"] = std::to_string(frame_skip);
  env["epsilon"] = io::exact_double(agent.epsilon);
  data.train.manifest.env = env;
  data.test.manifest.env = env;
  return data;
}

}  // namespace jointdyn::toyenv
