#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ndqfn/net.hpp"

namespace ndqfn {

// Checkpoint layout:
//
//   ndqfn-checkpoint 1
//   observation_dim <int>
//   num_actions <int>
//   embed_dim <int>
//   hidden_dim <int>
//   cosine_features <int>
//   increment_activation <relu|softplus>
//   grid_size <int>
//   seed <uint64>
//   step <int>
//   array <network>/<block> <rows> <cols>     (one line per array)
//   end
//   <raw little-endian float64 payload, arrays in header order, column-major>
//
// Every network in a checkpoint shares one architecture.

struct CheckpointInfo {
  Architecture architecture;
  int grid_size = 32;
  std::uint64_t seed = 0;
  long step = 0;
};

struct Checkpoint {
  CheckpointInfo info;
  std::map<std::string, NetworkParams> networks;

  const NetworkParams& network(const std::string& name) const {
    auto it = networks.find(name);
    if (it == networks.end()) throw ConfigError("checkpoint has no network named '" + name + "'");
    return it->second;
  }
};

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline void write_checkpoint(std::ostream& out, const CheckpointInfo& info,
                             const std::vector<std::pair<std::string, const NetworkParams*>>& networks) {
  const auto& a = info.architecture;
  out << "ndqfn-checkpoint 1\n"
      << "observation_dim " << a.observation_dim << '\n'
      << "num_actions " << a.num_actions << '\n'
      << "embed_dim " << a.embed_dim << '\n'
      << "hidden_dim " << a.hidden_dim << '\n'
      << "cosine_features " << a.cosine_features << '\n'
      << "increment_activation " << to_string(a.increment_activation) << '\n'
      << "grid_size " << info.grid_size << '\n'
      << "seed " << info.seed << '\n'
      << "step " << info.step << '\n';
  for (const auto& [name, params] : networks) {
    if (!(params->architecture() == a)) throw ConfigError("write_checkpoint: network '" + name + "' has a different architecture");
    for (const auto& block : params->layout()) {
      out << "array " << name << '/' << block.name << ' ' << block.rows << ' ' << block.cols << '\n';
    }
  }
  out << "end\n";
  for (const auto& entry : networks) {
    const auto values = entry.second->values();
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write_checkpoint: stream error");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  auto next_line = [&]() -> std::string {
    if (!std::getline(in, line)) throw ConfigError("checkpoint: unexpected end of header");
    return line;
  };
  if (next_line() != "ndqfn-checkpoint 1") throw ConfigError("checkpoint: bad magic line '" + line + "'");

  auto field = [&](const std::string& key) -> std::string {
    std::istringstream ss(next_line());
    std::string k, v;
    ss >> k >> v;
    if (k != key || v.empty()) throw ConfigError("checkpoint: expected '" + key + "', got '" + line + "'");
    return v;
  };

  CheckpointInfo info;
  auto& a = info.architecture;
  a.observation_dim = parse_integer<int>(field("observation_dim"));
  a.num_actions = parse_integer<int>(field("num_actions"));
  a.embed_dim = parse_integer<int>(field("embed_dim"));
  a.hidden_dim = parse_integer<int>(field("hidden_dim"));
  a.cosine_features = parse_integer<int>(field("cosine_features"));
  a.increment_activation = parse_activation(field("increment_activation"));
  info.grid_size = parse_integer<int>(field("grid_size"));
  info.seed = parse_integer<std::uint64_t>(field("seed"));
  info.step = parse_integer<long>(field("step"));
  a.validate();

  const ParameterLayout layout = make_layout(a);
  std::vector<std::string> order;
  std::map<std::string, int> seen_blocks;
  while (next_line() != "end") {
    std::istringstream ss(line);
    std::string tag, path;
    int rows = 0, cols = 0;
    ss >> tag >> path >> rows >> cols;
    const auto slash = path.find('/');
    if (tag != "array" || slash == std::string::npos) throw ConfigError("checkpoint: bad array line '" + line + "'");
    const std::string net = path.substr(0, slash), block = path.substr(slash + 1);
    const int index = seen_blocks[net]++;
    if (index == 0) order.push_back(net);
    if (index >= kBlockCount || layout[static_cast<std::size_t>(index)].name != block ||
        layout[static_cast<std::size_t>(index)].rows != rows || layout[static_cast<std::size_t>(index)].cols != cols) {
      throw ConfigError("checkpoint: array '" + path + "' does not match the declared architecture");
    }
  }

  Checkpoint ckpt{info, {}};
  for (const auto& name : order) {
    if (seen_blocks[name] != kBlockCount) throw ConfigError("checkpoint: network '" + name + "' is incomplete");
    NetworkParams params(a);
    auto values = params.values();
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw ConfigError("checkpoint: truncated payload");
    ckpt.networks.emplace(name, std::move(params));
  }
  return ckpt;
}

}  // namespace ndqfn
