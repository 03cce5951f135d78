#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jointdyn/datapipe.hpp"
#include "jointdyn/random.hpp"

namespace jointdyn::toyenv {

enum class Game { crossing, hunter };

std::string game_name(Game g);
Game parse_game(const std::string& name);

// Crossing actions.
inline constexpr std::uint8_t kNoop = 0, kUp = 1, kDown = 2;
// Hunter actions.
inline constexpr std::uint8_t kMoveUp = 0, kMoveDown = 1, kMoveLeft = 2, kMoveRight = 3, kTag = 4;

// Grayscale levels per object class.
inline constexpr std::uint8_t kAgentLevel = 255;
inline constexpr std::uint8_t kCarLevel = 160;
inline constexpr std::uint8_t kPreyLevel = 128;
inline constexpr std::uint8_t kGoalLevel = 64;

struct EnvConfig {
  Game game = Game::crossing;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  std::size_t resolution = 32;   // square frames
  double spawn_probability = 0;  // hunter: chance per cell-time of a new object
  std::size_t max_objects = 3;   // hunter
  std::size_t cars_per_lane = 1; // crossing
  std::size_t episode_length = 2000;  // emulator steps

  void validate() const;
  std::size_t num_actions() const { return game == Game::crossing ? 3 : 5; }
  std::size_t cell() const { return resolution / grid_rows; }
  std::map<std::string, std::string> describe() const;
};

struct Car {
  int x = 0;       // left edge in pixels, wraps around the frame width
  int lane = 1;    // grid row
  int dir = 1;     // +1 right, -1 left
  int period = 1;  // frames per one-pixel move
};

struct Prey {
  int x = 0, y = 0;
  int dir = 1;
};

struct EnvState {
  int agent_x = 0, agent_y = 0;
  std::vector<Car> cars;
  std::vector<Prey> prey;
  std::uint64_t step = 0;
  Rng rng;
};

struct StepResult {
  std::vector<std::uint8_t> frame;
  int reward = 0;
};

/// Reproducible initial state; the agent starts at the bottom-centre cell
/// (crossing) or the centre cell (hunter).
EnvState reset(const EnvConfig& config, std::uint64_t seed);

/// Frame as a pure function of the state.
std::vector<std::uint8_t> render(const EnvConfig& config, const EnvState& state);

/// Advances one emulator step. Throws std::invalid_argument on an illegal action.
StepResult step(const EnvConfig& config, EnvState& state, std::uint8_t action);

/// Cell the agent occupies (row, col).
std::pair<int, int> agent_cell(const EnvConfig& config, const EnvState& state);

enum class Policy { greedy_path, epsilon_greedy_path };

struct ScriptedAgent {
  Policy policy = Policy::greedy_path;
  double epsilon = 0.0;

  void validate() const;
  /// Action for the next decision, given `frame_skip` repeats.
  std::uint8_t act(const EnvConfig& config, const EnvState& state, std::size_t frame_skip, Rng& rng) const;
};

/// Plays `num_steps` emulator steps split into episodes of at most
/// config.episode_length. The agent decides every `frame_skip` steps and
/// repeats its action in between.
std::vector<datapipe::RawEpisode> generate_dataset(const EnvConfig& config, const ScriptedAgent& agent,
                                                   std::size_t num_steps, std::uint64_t seed,
                                                   std::size_t frame_skip = 4);

struct GameData {
  datapipe::Dataset train, test;
};

/// Generates episodes, decimates them, splits by trajectory and normalizes
/// both splits with the training mean image.
GameData make_game_data(const EnvConfig& config, const ScriptedAgent& agent, std::size_t num_steps,
                        std::uint64_t seed, double test_fraction = 0.2, std::size_t frame_skip = 4);

}  // namespace jointdyn::toyenv
