#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "jointdyn/datapipe.hpp"
#include "jointdyn/evalharness.hpp"
#include "jointdyn/gradcheck.hpp"
#include "jointdyn/netmodel.hpp"
#include "jointdyn/toyenv.hpp"
#include "jointdyn/training.hpp"

namespace py = pybind11;
using namespace jointdyn;

namespace {

netmodel::NetworkConfig network(const std::string& name, std::size_t num_actions) {
  if (name == "desk") return netmodel::NetworkConfig::desk(num_actions);
  if (name == "test16") return netmodel::NetworkConfig::test16(num_actions);
  if (name == "paper") return netmodel::NetworkConfig::paper(num_actions);
  throw std::invalid_argument("network must be desk, test16 or paper");
}

py::array_t<double> frames_array(const datapipe::Trajectory& t) {
  py::array_t<double> a({t.length(), t.height, t.width});
  std::copy(t.frames.begin(), t.frames.end(), a.mutable_data());
  return a;
}

py::array_t<int> error_array(const evalharness::CumRewardErrorDist& d) {
  const std::size_t rows = d.errors.size(), cols = rows ? d.errors[0].size() : 0;
  py::array_t<int> a({rows, cols});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t k = 0; k < rows; ++k)
    for (std::size_t j = 0; j < cols; ++j) m(k, j) = d.errors[k][j];
  return a;
}

training::TrainConfig train_config(const std::map<std::string, std::string>& overrides) {
  training::TrainConfig c;
  for (const auto& [k, v] : overrides) {
    if (!c.apply(k, v)) throw ConfigError("unknown training key '" + k + "'");
  }
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_jointdyn, m) {
  m.doc() = "Joint frame and reward prediction on toy pixel games";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<datapipe::DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<datapipe::Dataset>(m, "Dataset")
      .def_property_readonly("game", [](const datapipe::Dataset& d) { return d.manifest.game; })
      .def_property_readonly("split", [](const datapipe::Dataset& d) { return d.manifest.split; })
      .def_property_readonly("num_trajectories", [](const datapipe::Dataset& d) { return d.trajectories.size(); })
      .def_property_readonly("total_steps", &datapipe::Dataset::total_steps)
      .def_property_readonly("num_actions", [](const datapipe::Dataset& d) { return d.manifest.num_actions; })
      .def_property_readonly("frame_shape",
                             [](const datapipe::Dataset& d) {
                               return py::make_tuple(d.manifest.frame_height, d.manifest.frame_width);
                             })
      .def_property_readonly("reward_marginal", [](const datapipe::Dataset& d) { return d.manifest.reward_marginal; })
      .def("frames", [](const datapipe::Dataset& d, std::size_t i) { return frames_array(d.trajectories.at(i)); },
           "Normalized frames [N,H,W] of trajectory i.")
      .def("actions", [](const datapipe::Dataset& d, std::size_t i) {
        const auto& a = d.trajectories.at(i).actions;
        return std::vector<int>(a.begin(), a.end());
      })
      .def("rewards",
           [](const datapipe::Dataset& d, std::size_t i) {
             const auto& t = d.trajectories.at(i);
             std::vector<int> r;
             for (std::size_t n = 0; n < t.length(); ++n) r.push_back(t.reward_value(n));
             return r;
           })
      .def("to_bytes",
           [](const datapipe::Dataset& d) {
             const auto b = datapipe::serialize_dataset(d);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def_static("from_bytes",
                  [](const py::bytes& b) {
                    const std::string s = b;
                    return datapipe::deserialize_dataset(
                        {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
                  })
      .def("save", [](const datapipe::Dataset& d, const std::filesystem::path& p) { datapipe::write_dataset(p, d); })
      .def_static("load", &datapipe::read_dataset);

  m.def(
      "generate",
      [](const std::string& game, std::size_t steps, std::uint64_t seed, double spawn_probability, double epsilon,
         std::size_t resolution, std::size_t episode_length, double test_fraction) {
        toyenv::EnvConfig env;
        env.game = toyenv::parse_game(game);
        env.spawn_probability = spawn_probability;
        env.resolution = resolution;
        env.episode_length = episode_length;
        env.validate();
        const toyenv::ScriptedAgent agent{toyenv::Policy::epsilon_greedy_path, epsilon};
        agent.validate();
        auto d = toyenv::make_game_data(env, agent, steps * 4, seed, test_fraction);
        return py::make_tuple(std::move(d.train), std::move(d.test));
      },
      py::arg("game") = "crossing", py::arg("steps") = 20000, py::arg("seed") = 0, py::arg("spawn_probability") = 0.0,
      py::arg("epsilon") = 0.2, py::arg("resolution") = 32, py::arg("episode_length") = 2000,
      py::arg("test_fraction") = 0.2,
      "Plays a toy game with the scripted agent; `steps` counts agent decisions. Returns (train, test).");

  py::class_<netmodel::JointModelParams>(m, "Model")
      .def_static(
          "init",
          [](const std::string& net, std::size_t num_actions, std::uint64_t seed, const std::string& variant) {
            return netmodel::init_weights(network(net, num_actions), seed, netmodel::parse_variant(variant));
          },
          py::arg("network") = "desk", py::arg("num_actions") = 3, py::arg("seed") = 0, py::arg("variant") = "joint")
      .def_property_readonly("variant",
                             [](const netmodel::JointModelParams& p) { return netmodel::variant_name(p.variant); })
      .def_property_readonly("seed", [](const netmodel::JointModelParams& p) { return p.seed; })
      .def_property_readonly("history", [](const netmodel::JointModelParams& p) { return p.config.history; })
      .def_property_readonly("num_parameters",
                             [](const netmodel::JointModelParams& p) { return netmodel::count_parameters(p); })
      .def("parameter_names",
           [](const netmodel::JointModelParams& p) {
             std::vector<std::string> names;
             for (const auto& [n, t] : p.named_parameters()) names.push_back(n);
             return names;
           })
      .def(
          "rollout",
          [](const netmodel::JointModelParams& p, py::array_t<double, py::array::c_style | py::array::forcecast> history,
             const std::vector<std::size_t>& actions) {
            const auto& c = p.config;
            if (history.ndim() != 3 || static_cast<std::size_t>(history.shape(0)) != c.history ||
                static_cast<std::size_t>(history.shape(1)) != c.frame_height ||
                static_cast<std::size_t>(history.shape(2)) != c.frame_width) {
              throw DimensionError("history must have shape [history, H, W]");
            }
            const std::size_t fs = c.frame_height * c.frame_width;
            std::vector<tensorgrad::Tensor> h;
            for (std::size_t j = 0; j < c.history; ++j) {
              h.emplace_back(tensorgrad::Shape{1, c.frame_height, c.frame_width},
                             std::vector<double>(history.data() + j * fs, history.data() + (j + 1) * fs));
            }
            std::vector<tensorgrad::Tensor> acts;
            for (auto a : actions) acts.push_back(netmodel::one_hot(a, c.num_actions));
            const auto out = netmodel::rollout(nullptr, p, h, acts, {netmodel::Mode::eval, false});
            py::array_t<double> frames({out.size(), c.frame_height, c.frame_width});
            std::vector<int> rewards;
            for (std::size_t k = 0; k < out.size(); ++k) {
              std::copy(out[k].frame.values().begin(), out[k].frame.values().end(), frames.mutable_data() + k * fs);
              rewards.push_back(netmodel::predicted_reward_value(out[k].reward_probs));
            }
            return py::make_tuple(frames, rewards);
          },
          py::arg("history"), py::arg("actions"),
          "Eval-mode rollout. Returns (frames [K,H,W], rewards as -1/0/+1).")
      .def("to_bytes",
           [](const netmodel::JointModelParams& p) {
             const auto b = netmodel::serialize_checkpoint(p);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def("save", [](const netmodel::JointModelParams& p, const std::filesystem::path& path) {
        netmodel::save_checkpoint(path, p);
      })
      .def_static("load", &netmodel::load_checkpoint);

  m.def(
      "train",
      [](const datapipe::Dataset& data, const std::string& net, const std::string& variant,
         const std::map<std::string, std::string>& config) {
        const auto cfg = train_config(config);
        training::TrainResult r;
        {
          py::gil_scoped_release release;
          r = training::train_loop(data, network(net, data.manifest.num_actions), netmodel::parse_variant(variant),
                                   cfg);
        }
        py::dict log;
        std::vector<double> total, frame, reward;
        std::vector<std::size_t> K;
        for (const auto& row : r.log) {
          total.push_back(row.total);
          frame.push_back(row.frame);
          reward.push_back(row.reward);
          K.push_back(row.K);
        }
        log["total"] = total;
        log["frame"] = frame;
        log["reward"] = reward;
        log["K"] = K;
        return py::make_tuple(std::move(r.model), log);
      },
      py::arg("data"), py::arg("network") = "desk", py::arg("variant") = "joint",
      py::arg("config") = std::map<std::string, std::string>{},
      "Trains a fresh model. `config` holds training keys as strings, e.g. {'total_iterations': '100'}. "
      "Returns (model, loss log).");

  m.def(
      "evaluate",
      [](const netmodel::JointModelParams& model, const datapipe::Dataset& test, std::size_t trajectories,
         std::size_t max_lookahead, std::uint64_t seed, bool paired_baseline) {
        evalharness::RolloutEvalConfig cfg;
        cfg.num_eval_trajectories = trajectories;
        cfg.max_lookahead = max_lookahead;
        cfg.seed = seed;
        cfg.paired_baseline = paired_baseline;
        cfg.validate();
        evalharness::CumRewardErrorDist dist, base;
        {
          py::gil_scoped_release release;
          dist = evalharness::eval_cumulative_reward(evalharness::ModelRewardPredictor(model), test, cfg,
                                                     model.config.history);
          base = evalharness::marginal_baseline(test, cfg, model.config.history);
        }
        py::dict out;
        out["errors"] = error_array(dist);
        out["baseline_errors"] = error_array(base);
        return out;
      },
      py::arg("model"), py::arg("test"), py::arg("trajectories") = 200, py::arg("max_lookahead") = 30,
      py::arg("seed") = 0, py::arg("paired_baseline") = true,
      "Cumulative reward error (truth minus prediction), [max_lookahead+1, trajectories], for model and baseline.");

  m.def(
      "check_gradients",
      [](std::uint64_t seed) {
        std::map<std::string, double> out;
        for (const auto& c : tensorgrad::check_all_ops(seed)) out[c.op] = c.result.max_relative_error;
        return out;
      },
      py::arg("seed") = 1, "Max relative finite-difference error per op.");

  m.def(
      "curriculum_phase",
      [](const std::string& schedule, std::uint64_t iteration) {
        const auto s = schedule == "paper"  ? training::CurriculumSchedule::paper()
                       : schedule == "desk" ? training::CurriculumSchedule::desk()
                                            : training::CurriculumSchedule::from_text(schedule);
        const auto& p = training::curriculum_lookup(s, iteration);
        return py::make_tuple(p.lookahead_K, p.minibatch_I, p.learning_rate);
      },
      py::arg("schedule"), py::arg("iteration"),
      "(K, I, learning rate) in effect; schedule is 'paper', 'desk' or 'start:K:I:lr,...'.");

  m.def("percentile", &evalharness::percentile, py::arg("samples"), py::arg("q"));
}
