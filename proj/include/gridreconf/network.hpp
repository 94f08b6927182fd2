#pragma once

/// @file network.hpp
/// @brief Multiphase distribution-network model: schema, validation, topology queries.
///
/// A network is a set of nodes (one substation, loads, optional distributed
/// generators) and lines (phase impedance matrices, optional switches,
/// optional ampacity caps, optional per-line regularization weights).
/// All electrical data is stored in SI units exactly as parsed; per-unit
/// conversion happens where programs are assembled.

#include <algorithm>
#include <array>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridreconf/common.hpp"

namespace gridreconf {

using json = nlohmann::ordered_json;

/// One phase of a wye-connected load, exponential voltage dependence kappa.
struct PhaseLoad {
  double p_w = 0.0;    ///< active power [W]
  double q_var = 0.0;  ///< reactive power [var]
  int kappa = 0;       ///< exponent: 0 constant power, 1 constant current, 2 constant impedance
};

/// One phase of a dispatchable generator with box limits and a linear cost.
struct PhaseDg {
  double p_min_w = 0.0;
  double p_max_w = 0.0;
  double q_min_var = 0.0;
  double q_max_var = 0.0;
  double cost_per_w = 0.0;  ///< linear active-power cost coefficient
};

struct Node {
  int id = 0;
  std::vector<int> phases;  ///< sorted subset of {0,1,2}
  bool substation = false;
  std::array<std::optional<PhaseLoad>, 3> load;  ///< indexed by phase
  std::array<std::optional<PhaseDg>, 3> dg;      ///< indexed by phase

  bool has_load() const {
    for (const auto& l : load)
      if (l && (l->p_w != 0.0 || l->q_var != 0.0)) return true;
    return false;
  }
  bool has_dg() const {
    for (const auto& g : dg)
      if (g) return true;
    return false;
  }
};

struct Line {
  int from = 0;  ///< node id of the tail (direction from -> to)
  int to = 0;    ///< node id of the head
  std::vector<int> phases;
  CMat z_ohm;  ///< |P|x|P| complex phase impedance matrix [ohm]
  bool switchable = false;
  std::optional<double> i_max_amp;      ///< per-phase current magnitude cap [A]
  std::optional<double> lambda_weight;  ///< per-line regularization override [V]
};

/// Impedance catalogue entry: per-mile phase impedance for a line construction.
struct LineConfig {
  int id = 0;
  std::vector<int> phases;
  CMat z_per_mile_ohm;
};

class Network {
 public:
  double v_nominal_v = 0.0;  ///< line-to-line nominal voltage [V]
  double s_base_va = 0.0;    ///< three-phase power base [VA]
  std::vector<Node> nodes;
  std::vector<Line> lines;
  std::vector<LineConfig> configs;  ///< retained for serialization fidelity

  BaseUnits base() const { return BaseUnits{v_nominal_v, s_base_va}; }

  int node_count() const { return static_cast<int>(nodes.size()); }
  int line_count() const { return static_cast<int>(lines.size()); }

  int node_index(int id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ModelError("unknown node id " + std::to_string(id));
    return it->second;
  }
  int substation_index() const { return substation_index_; }

  /// Position of a phase within a node's phase list; -1 when absent.
  static int phase_pos(const std::vector<int>& phases, int phase) {
    for (size_t i = 0; i < phases.size(); ++i)
      if (phases[i] == phase) return static_cast<int>(i);
    return -1;
  }

  std::vector<int> switchable_lines() const {
    std::vector<int> out;
    for (int e = 0; e < line_count(); ++e)
      if (lines[e].switchable) out.push_back(e);
    return out;
  }

  /// Rebuild indices and check every schema invariant; throws ModelError.
  void validate() {
    index_.clear();
    substation_index_ = -1;
    if (v_nominal_v <= 0.0) throw ModelError("v_nominal_kv must be positive");
    if (s_base_va <= 0.0) throw ModelError("s_base_kva must be positive");
    if (nodes.empty()) throw ModelError("network has no nodes");
    for (int i = 0; i < node_count(); ++i) {
      Node& n = nodes[i];
      if (n.id < 0) throw ModelError("node id must be >= 0");
      if (!index_.emplace(n.id, i).second)
        throw ModelError("duplicate node id " + std::to_string(n.id));
      if (n.phases.empty()) throw ModelError("node " + std::to_string(n.id) + " has no phases");
      std::vector<int> ph = n.phases;
      std::sort(ph.begin(), ph.end());
      if (std::adjacent_find(ph.begin(), ph.end()) != ph.end())
        throw ModelError("node " + std::to_string(n.id) + " repeats a phase");
      for (int p : ph)
        if (p < 0 || p > 2) throw ModelError("node " + std::to_string(n.id) + " has invalid phase");
      n.phases = ph;
      for (int p = 0; p < 3; ++p) {
        if (n.load[p] && phase_pos(n.phases, p) < 0)
          throw ModelError("node " + std::to_string(n.id) + " load on absent phase");
        if (n.load[p] && (n.load[p]->kappa < 0 || n.load[p]->kappa > 2))
          throw ModelError("node " + std::to_string(n.id) + " kappa must be 0, 1 or 2");
        if (n.dg[p] && phase_pos(n.phases, p) < 0)
          throw ModelError("node " + std::to_string(n.id) + " dg on absent phase");
        if (n.dg[p] && (n.dg[p]->p_min_w > n.dg[p]->p_max_w || n.dg[p]->q_min_var > n.dg[p]->q_max_var))
          throw ModelError("node " + std::to_string(n.id) + " dg bounds inverted");
      }
      if (n.substation) {
        if (substation_index_ >= 0) throw ModelError("more than one substation");
        substation_index_ = i;
        if (n.has_load() || n.has_dg())
          throw ModelError("substation must carry no load and no dg");
      }
    }
    if (substation_index_ < 0) throw ModelError("exactly one substation required");
    for (int e = 0; e < line_count(); ++e) {
      const Line& ln = lines[e];
      std::string tag = "line " + std::to_string(e) + " (" + std::to_string(ln.from) + "," +
                        std::to_string(ln.to) + ")";
      if (ln.from == ln.to) throw ModelError(tag + ": self loop");
      int m = node_index(ln.from), n = node_index(ln.to);
      if (ln.phases.empty()) throw ModelError(tag + ": no phases");
      for (int p : ln.phases) {
        if (phase_pos(nodes[m].phases, p) < 0 || phase_pos(nodes[n].phases, p) < 0)
          throw ModelError(tag + ": phase not present at both endpoints");
      }
      const int np = static_cast<int>(ln.phases.size());
      if (ln.z_ohm.rows() != np || ln.z_ohm.cols() != np)
        throw ModelError(tag + ": impedance matrix shape mismatch");
      const double zn = ln.z_ohm.norm();
      if (!(zn > 0.0)) throw ModelError(tag + ": zero impedance");
      if ((ln.z_ohm - ln.z_ohm.transpose()).norm() > 1e-8 * zn)
        throw ModelError(tag + ": impedance matrix must be symmetric");
      Eigen::SelfAdjointEigenSolver<Mat> es(ln.z_ohm.real());
      if (es.eigenvalues().minCoeff() <= 0.0)
        throw ModelError(tag + ": resistive part must be positive definite");
      if (ln.i_max_amp && *ln.i_max_amp <= 0.0) throw ModelError(tag + ": i_max_amp must be positive");
      if (ln.lambda_weight && *ln.lambda_weight < 0.0)
        throw ModelError(tag + ": lambda_weight must be nonnegative");
    }
    std::vector<char> all(lines.size(), 1);
    if (!connected(all)) throw ModelError("network graph is not connected");
  }

  // ---------------------------------------------------------------- topology

  /// Number of connected components of the subgraph given by closed lines.
  int components(const std::vector<char>& closed) const {
    std::vector<int> comp(nodes.size(), -1);
    int ncomp = 0;
    for (int s = 0; s < node_count(); ++s) {
      if (comp[s] >= 0) continue;
      comp[s] = ncomp;
      std::deque<int> bfs{s};
      while (!bfs.empty()) {
        int u = bfs.front();
        bfs.pop_front();
        for (const auto& [e, w] : adjacency()[u]) {
          if (!closed[e] || comp[w] >= 0) continue;
          comp[w] = ncomp;
          bfs.push_back(w);
        }
      }
      ++ncomp;
    }
    return ncomp;
  }

  bool connected(const std::vector<char>& closed) const { return components(closed) == 1; }

  /// Radial = spanning tree: connected with |closed| = |N|-1.
  bool radial(const std::vector<char>& closed) const {
    int cnt = 0;
    for (char c : closed) cnt += (c != 0);
    return cnt == node_count() - 1 && connected(closed);
  }

  /// One step of a node-to-node walk: the line used and the orientation
  /// sign (alpha = -1 when the walk follows the line's from->to direction,
  /// +1 when it goes against it).
  struct PathStep {
    int line = -1;
    double alpha = 0.0;
  };

  /// A voltage reference for a constrained node: reference node index plus
  /// the walk (ref -> target) over switch-free lines.
  struct Reference {
    int ref_node = -1;
    std::vector<PathStep> path;
  };

  /// Find a switch-free walk from an admissible voltage reference to
  /// `target` (node index). Preference order: the substation, then the
  /// hop-nearest loaded node (ties: lowest node id). Empty when no
  /// switch-free reference exists.
  std::optional<Reference> switch_free_path(int target) const {
    // BFS over non-switchable lines only, rooted at the target.
    std::vector<int> prev_node(nodes.size(), -1), prev_line(nodes.size(), -1),
        dist(nodes.size(), -1);
    dist[target] = 0;
    std::deque<int> bfs{target};
    while (!bfs.empty()) {
      int u = bfs.front();
      bfs.pop_front();
      for (const auto& [e, w] : adjacency()[u]) {
        if (lines[e].switchable || dist[w] >= 0) continue;
        dist[w] = dist[u] + 1;
        prev_node[w] = u;
        prev_line[w] = e;
        bfs.push_back(w);
      }
    }
    int ref = -1;
    if (dist[substation_index_] >= 0) {
      ref = substation_index_;
    } else {
      int best_d = -1, best_id = 0;
      for (int v = 0; v < node_count(); ++v) {
        if (dist[v] < 0 || !nodes[v].has_load()) continue;
        if (ref < 0 || dist[v] < best_d || (dist[v] == best_d && nodes[v].id < best_id)) {
          ref = v;
          best_d = dist[v];
          best_id = nodes[v].id;
        }
      }
    }
    if (ref < 0) return std::nullopt;
    // Walk ref -> target; the BFS tree stores steps toward the target root.
    Reference out;
    out.ref_node = ref;
    for (int v = ref; v != target; v = prev_node[v]) {
      int e = prev_line[v];
      int u = prev_node[v];  // step v -> u along the walk toward target
      // alpha = -1 when traversing from lines[e].from to lines[e].to.
      double alpha = (node_index(lines[e].from) == v && node_index(lines[e].to) == u) ? -1.0 : 1.0;
      out.path.push_back({e, alpha});
    }
    return out;
  }

  /// Minimum-total-resistance spanning tree of the closed subgraph, rooted at
  /// the substation (Prim). Returns per-node parent line (-1 at the root).
  /// Throws when the closed subgraph is disconnected.
  std::vector<int> min_resistance_tree(const std::vector<char>& closed) const {
    const int N = node_count();
    std::vector<int> parent_line(N, -1);
    std::vector<char> in_tree(N, 0);
    using Item = std::tuple<double, int, int, int>;  // (weight, tiebreak node id, node, line)
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    pq.emplace(0.0, nodes[substation_index_].id, substation_index_, -1);
    int reached = 0;
    while (!pq.empty()) {
      auto [w, nid, u, le] = pq.top();
      pq.pop();
      (void)w;
      (void)nid;
      if (in_tree[u]) continue;
      in_tree[u] = 1;
      parent_line[u] = le;
      ++reached;
      for (const auto& [e, v] : adjacency()[u]) {
        if (!closed[e] || in_tree[v]) continue;
        pq.emplace(lines[e].z_ohm.real().trace(), nodes[v].id, v, e);
      }
    }
    if (reached != N) throw ModelError("selected topology disconnected: tree does not span all nodes");
    return parent_line;
  }

  /// Adjacency list: per node index, (line index, neighbor node index) pairs.
  const std::vector<std::vector<std::pair<int, int>>>& adjacency() const {
    if (adj_.size() != nodes.size()) {
      adj_.assign(nodes.size(), {});
      for (int e = 0; e < line_count(); ++e) {
        int m = node_index(lines[e].from), n = node_index(lines[e].to);
        adj_[m].emplace_back(e, n);
        adj_[n].emplace_back(e, m);
      }
    }
    return adj_;
  }

  // ------------------------------------------------------------------- JSON

  static Network from_json(const json& j) {
    Network net;
    if (!j.contains("v_nominal_kv")) throw ModelError("missing v_nominal_kv");
    if (!j.contains("s_base_kva")) throw ModelError("missing s_base_kva");
    net.v_nominal_v = j.at("v_nominal_kv").get<double>() * 1e3;
    net.s_base_va = j.at("s_base_kva").get<double>() * 1e3;
    std::map<int, LineConfig> cfg_by_id;
    for (const auto& jc : j.value("configs", json::array())) {
      LineConfig c;
      c.id = jc.at("id").get<int>();
      c.phases = parse_phases(jc.at("phases"));
      c.z_per_mile_ohm = parse_cmat(jc.at("z_per_mile_real"), jc.at("z_per_mile_imag"),
                                    static_cast<int>(c.phases.size()), "config");
      if (!cfg_by_id.emplace(c.id, c).second) throw ModelError("duplicate config id");
      net.configs.push_back(c);
    }
    if (!j.contains("nodes") || !j.contains("lines")) throw ModelError("missing nodes or lines");
    for (const auto& jn : j.at("nodes")) {
      Node n;
      n.id = jn.at("id").get<int>();
      n.phases = parse_phases(jn.at("phases"));
      n.substation = jn.value("substation", false);
      for (const auto& jl : jn.value("load", json::array())) {
        if (jl.value("connection", std::string("wye")) != "wye")
          throw ModelError("node " + std::to_string(n.id) + ": only wye loads are supported");
        int p = parse_phase(jl.at("phase"));
        PhaseLoad L;
        L.p_w = jl.value("p_kw", 0.0) * 1e3;
        L.q_var = jl.value("q_kvar", 0.0) * 1e3;
        L.kappa = jl.value("kappa", 0);
        n.load[p] = L;
      }
      for (const auto& jg : jn.value("dg", json::array())) {
        int p = parse_phase(jg.at("phase"));
        PhaseDg g;
        g.p_min_w = jg.value("p_min_kw", 0.0) * 1e3;
        g.p_max_w = jg.value("p_max_kw", 0.0) * 1e3;
        g.q_min_var = jg.value("q_min_kvar", 0.0) * 1e3;
        g.q_max_var = jg.value("q_max_kvar", 0.0) * 1e3;
        g.cost_per_w = jg.value("cost", 0.0);
        n.dg[p] = g;
      }
      net.nodes.push_back(std::move(n));
    }
    for (const auto& jl : j.at("lines")) {
      Line ln;
      ln.from = jl.at("from").get<int>();
      ln.to = jl.at("to").get<int>();
      ln.phases = parse_phases(jl.at("phases"));
      const int np = static_cast<int>(ln.phases.size());
      if (jl.contains("config_id")) {
        auto it = cfg_by_id.find(jl.at("config_id").get<int>());
        if (it == cfg_by_id.end()) throw ModelError("line references unknown config_id");
        if (it->second.phases != ln.phases)
          throw ModelError("line phases differ from config phases");
        const double miles = jl.at("length_ft").get<double>() / 5280.0;
        ln.z_ohm = it->second.z_per_mile_ohm * miles;
      } else {
        ln.z_ohm = parse_cmat(jl.at("z_real"), jl.at("z_imag"), np, "line");
      }
      ln.switchable = jl.value("switchable", false);
      if (jl.contains("i_max_amp")) ln.i_max_amp = jl.at("i_max_amp").get<double>();
      if (jl.contains("lambda_weight")) ln.lambda_weight = jl.at("lambda_weight").get<double>();
      net.lines.push_back(std::move(ln));
    }
    net.validate();
    return net;
  }

  json to_json() const {
    json j;
    j["v_nominal_kv"] = v_nominal_v / 1e3;
    j["s_base_kva"] = s_base_va / 1e3;
    j["nodes"] = json::array();
    for (const Node& n : nodes) {
      json jn;
      jn["id"] = n.id;
      jn["phases"] = n.phases;
      if (n.substation) jn["substation"] = true;
      json loads = json::array(), dgs = json::array();
      for (int p = 0; p < 3; ++p) {
        if (n.load[p]) {
          loads.push_back({{"phase", p},
                           {"p_kw", n.load[p]->p_w / 1e3},
                           {"q_kvar", n.load[p]->q_var / 1e3},
                           {"kappa", n.load[p]->kappa}});
        }
        if (n.dg[p]) {
          dgs.push_back({{"phase", p},
                         {"p_min_kw", n.dg[p]->p_min_w / 1e3},
                         {"p_max_kw", n.dg[p]->p_max_w / 1e3},
                         {"q_min_kvar", n.dg[p]->q_min_var / 1e3},
                         {"q_max_kvar", n.dg[p]->q_max_var / 1e3},
                         {"cost", n.dg[p]->cost_per_w}});
        }
      }
      if (!loads.empty()) jn["load"] = loads;
      if (!dgs.empty()) jn["dg"] = dgs;
      j["nodes"].push_back(jn);
    }
    j["lines"] = json::array();
    for (const Line& ln : lines) {
      json jl;
      jl["from"] = ln.from;
      jl["to"] = ln.to;
      jl["phases"] = ln.phases;
      const int np = static_cast<int>(ln.phases.size());
      json zre = json::array(), zim = json::array();
      for (int r = 0; r < np; ++r) {
        json rr = json::array(), ri = json::array();
        for (int c = 0; c < np; ++c) {
          rr.push_back(ln.z_ohm(r, c).real());
          ri.push_back(ln.z_ohm(r, c).imag());
        }
        zre.push_back(rr);
        zim.push_back(ri);
      }
      jl["z_real"] = zre;
      jl["z_imag"] = zim;
      if (ln.switchable) jl["switchable"] = true;
      if (ln.i_max_amp) jl["i_max_amp"] = *ln.i_max_amp;
      if (ln.lambda_weight) jl["lambda_weight"] = *ln.lambda_weight;
      j["lines"].push_back(jl);
    }
    return j;
  }

  static Network load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ModelError("cannot open network file: " + path);
    json j;
    try {
      in >> j;
    } catch (const std::exception& ex) {
      throw ModelError("invalid JSON in " + path + ": " + ex.what());
    }
    return from_json(j);
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ModelError("cannot write network file: " + path);
    out << to_json().dump(2) << "\n";
  }

 private:
  static int parse_phase(const json& jp) {
    if (jp.is_number_integer()) {
      int p = jp.get<int>();
      if (p < 0 || p > 2) throw ModelError("phase index out of range");
      return p;
    }
    std::string s = jp.get<std::string>();
    if (s == "a" || s == "A") return 0;
    if (s == "b" || s == "B") return 1;
    if (s == "c" || s == "C") return 2;
    throw ModelError("invalid phase label: " + s);
  }

  static std::vector<int> parse_phases(const json& jp) {
    std::vector<int> out;
    for (const auto& v : jp) out.push_back(parse_phase(v));
    return out;
  }

  static CMat parse_cmat(const json& jre, const json& jim, int np, const std::string& what) {
    if (static_cast<int>(jre.size()) != np || static_cast<int>(jim.size()) != np)
      throw ModelError(what + ": impedance row count mismatch");
    CMat z(np, np);
    for (int r = 0; r < np; ++r) {
      if (static_cast<int>(jre[r].size()) != np || static_cast<int>(jim[r].size()) != np)
        throw ModelError(what + ": impedance column count mismatch");
      for (int c = 0; c < np; ++c)
        z(r, c) = cplx(jre[r][c].get<double>(), jim[r][c].get<double>());
    }
    return z;
  }

  std::unordered_map<int, int> index_;
  int substation_index_ = -1;
  mutable std::vector<std::vector<std::pair<int, int>>> adj_;
};

}  // namespace gridreconf
