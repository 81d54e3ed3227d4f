#include "cityfabric/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"
#include "cityfabric/types.hpp"

namespace cityfabric {

std::optional<uint32_t> RoadGraph::find(std::string_view id) const {
  for (size_t i = 0; i < vertices.size(); ++i)
    if (vertices[i].id == id) return static_cast<uint32_t>(i);
  return std::nullopt;
}

void RoadGraph::validate() const {
  IdTable ids;
  for (const auto& v : vertices) {
    if (v.id.empty()) throw Error(ErrorCode::kInvalidArgument, "road vertex with empty id");
    if (!ids.insert(v.id)) throw Error(ErrorCode::kDuplicateId, "junction '" + v.id + "' listed twice");
  }
  for (const auto& [a, b] : edges) {
    if (a >= vertices.size() || b >= vertices.size())
      throw Error(ErrorCode::kReference, "road edge references a missing vertex");
    if (a == b) throw Error(ErrorCode::kInvalidArgument, "self-loop at junction '" + vertices[a].id + "'");
  }
}

RoadGraph road_graph_from_json(const nlohmann::json& j) {
  RoadGraph g;
  IdTable ids;
  for (const auto& v : j.at("vertices")) {
    RoadVertex rv;
    rv.id = v.at("id").get<std::string>();
    rv.camera = v.value("camera", false);
    if (v.contains("x") && !v["x"].is_null()) rv.x = v["x"].get<double>();
    if (v.contains("y") && !v["y"].is_null()) rv.y = v["y"].get<double>();
    if (!ids.insert(rv.id)) throw Error(ErrorCode::kDuplicateId, "junction '" + rv.id + "' listed twice");
    g.vertices.push_back(std::move(rv));
  }
  for (const auto& e : j.at("edges")) {
    const auto a = e.at(0).get<std::string>();
    const auto b = e.at(1).get<std::string>();
    const long ia = ids.find(a);
    const long ib = ids.find(b);
    if (ia < 0) throw Error(ErrorCode::kReference, "edge references unknown junction '" + a + "'");
    if (ib < 0) throw Error(ErrorCode::kReference, "edge references unknown junction '" + b + "'");
    g.edges.emplace_back(static_cast<uint32_t>(ia), static_cast<uint32_t>(ib));
  }
  g.validate();
  return g;
}

nlohmann::json road_graph_to_json(const RoadGraph& g) {
  nlohmann::json verts = nlohmann::json::array();
  for (const auto& v : g.vertices) {
    nlohmann::json jv = {{"id", v.id}, {"camera", v.camera}};
    if (v.x) jv["x"] = *v.x;
    if (v.y) jv["y"] = *v.y;
    verts.push_back(std::move(jv));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : g.edges) edges.push_back({g.vertices[a].id, g.vertices[b].id});
  return {{"vertices", std::move(verts)}, {"edges", std::move(edges)}};
}

// ---------------------------------------------------------------------------

std::optional<uint32_t> CoarseGraph::find_vertex(std::string_view id) const {
  for (size_t i = 0; i < vertex_ids.size(); ++i)
    if (vertex_ids[i] == id) return static_cast<uint32_t>(i);
  return std::nullopt;
}

std::optional<size_t> CoarseGraph::find_edge(uint32_t a, uint32_t b) const {
  if (a > b) std::swap(a, b);
  auto it = std::lower_bound(edges.begin(), edges.end(), std::pair{a, b},
                             [](const SuperEdge& e, std::pair<uint32_t, uint32_t> k) {
                               return std::pair{e.u, e.v} < k;
                             });
  if (it == edges.end() || it->u != a || it->v != b) return std::nullopt;
  return static_cast<size_t>(it - edges.begin());
}

std::vector<std::vector<size_t>> CoarseGraph::incidence() const {
  std::vector<std::vector<size_t>> inc(vertex_ids.size());
  for (size_t e = 0; e < edges.size(); ++e) {
    inc[edges[e].u].push_back(e);
    inc[edges[e].v].push_back(e);
  }
  return inc;
}

std::string CoarseGraph::edge_name(size_t e) const {
  return vertex_ids[edges[e].u] + "--" + vertex_ids[edges[e].v];
}

std::optional<size_t> CoarseGraph::find_edge_by_name(std::string_view name) const {
  const auto sep = name.find("--");
  if (sep == std::string_view::npos) return std::nullopt;
  auto a = find_vertex(name.substr(0, sep));
  auto b = find_vertex(name.substr(sep + 2));
  if (!a || !b) return std::nullopt;
  return find_edge(*a, *b);
}

CoarseGraph coarsen(const RoadGraph& g) {
  g.validate();
  const size_t n = g.vertices.size();
  // Adjacency as (neighbor, edge id) so parallel edges stay distinct.
  std::vector<std::vector<std::pair<uint32_t, size_t>>> adj(n);
  for (size_t e = 0; e < g.edges.size(); ++e) {
    adj[g.edges[e].first].emplace_back(g.edges[e].second, e);
    adj[g.edges[e].second].emplace_back(g.edges[e].first, e);
  }

  CoarseGraph cg;
  std::vector<long> coarse_of(n, -1);
  for (size_t i = 0; i < n; ++i) {
    if (!g.vertices[i].camera) continue;
    coarse_of[i] = static_cast<long>(cg.vertex_ids.size());
    cg.vertex_ids.push_back(g.vertices[i].id);
    if (g.vertices[i].x && g.vertices[i].y) cg.layout.emplace_back(std::pair{*g.vertices[i].x, *g.vertices[i].y});
    else cg.layout.emplace_back(std::nullopt);
  }

  std::map<std::pair<uint32_t, uint32_t>, SuperEdge> merged;
  for (size_t a = 0; a < n; ++a) {
    if (!g.vertices[a].camera) continue;
    for (const auto& [first, first_edge] : adj[a]) {
      uint32_t cur = first;
      size_t via = first_edge;
      uint32_t length = 1;
      // Walk through camera-less pass-through vertices.
      while (!g.vertices[cur].camera && adj[cur].size() == 2) {
        const auto& next = adj[cur][0].second == via ? adj[cur][1] : adj[cur][0];
        via = next.second;
        cur = next.first;
        ++length;
      }
      if (!g.vertices[cur].camera || cur == a) continue;
      // Each path is found from both ends; keep the walk from the lower endpoint.
      if (cur < a) continue;
      const auto u = static_cast<uint32_t>(coarse_of[a]);
      const auto v = static_cast<uint32_t>(coarse_of[cur]);
      auto [it, inserted] = merged.try_emplace({u, v}, SuperEdge{u, v, 1, length});
      if (!inserted) {
        ++it->second.weight;
        it->second.hop_length = std::min(it->second.hop_length, length);
      }
    }
  }
  for (auto& [key, e] : merged) cg.edges.push_back(e);

  std::vector<bool> touched(cg.vertex_ids.size(), false);
  for (const auto& e : cg.edges) touched[e.u] = touched[e.v] = true;
  for (size_t i = 0; i < touched.size(); ++i) {
    if (!touched[i])
      throw Error(ErrorCode::kIsolatedCameraVertex, "camera junction '" + cg.vertex_ids[i] +
                                                        "' has no collapsed path to another camera junction");
  }
  return cg;
}

RoadGraph expand_to_road_graph(const CoarseGraph& cg) {
  RoadGraph g;
  for (size_t i = 0; i < cg.vertex_ids.size(); ++i) {
    RoadVertex v{cg.vertex_ids[i], true, std::nullopt, std::nullopt};
    if (cg.layout[i]) {
      v.x = cg.layout[i]->first;
      v.y = cg.layout[i]->second;
    }
    g.vertices.push_back(std::move(v));
  }
  for (const auto& e : cg.edges) {
    for (uint32_t path = 0; path < e.weight; ++path) {
      uint32_t prev = e.u;
      for (uint32_t hop = 1; hop < e.hop_length; ++hop) {
        const auto idx = static_cast<uint32_t>(g.vertices.size());
        g.vertices.push_back(RoadVertex{"~" + cg.vertex_ids[e.u] + "~" + cg.vertex_ids[e.v] + "~" +
                                            std::to_string(path) + "~" + std::to_string(hop),
                                        false, std::nullopt, std::nullopt});
        g.edges.emplace_back(prev, idx);
        prev = idx;
      }
      g.edges.emplace_back(prev, e.v);
    }
  }
  return g;
}

nlohmann::json coarse_graph_to_json(const CoarseGraph& cg) {
  nlohmann::json verts = nlohmann::json::array();
  for (size_t i = 0; i < cg.vertex_ids.size(); ++i) {
    nlohmann::json v = {{"id", cg.vertex_ids[i]}};
    if (cg.layout[i]) {
      v["x"] = cg.layout[i]->first;
      v["y"] = cg.layout[i]->second;
    }
    verts.push_back(std::move(v));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (size_t e = 0; e < cg.edges.size(); ++e) {
    edges.push_back({{"id", cg.edge_name(e)},
                     {"u", cg.vertex_ids[cg.edges[e].u]},
                     {"v", cg.vertex_ids[cg.edges[e].v]},
                     {"weight", cg.edges[e].weight},
                     {"hop_length", cg.edges[e].hop_length}});
  }
  return {{"vertices", std::move(verts)}, {"super_edges", std::move(edges)}};
}

// ---------------------------------------------------------------------------

EdgeWeighting parse_weighting(std::string_view text) {
  if (text == "multiplicity") return EdgeWeighting::kMultiplicity;
  if (text == "inverse_length") return EdgeWeighting::kInverseLength;
  throw Error(ErrorCode::kInvalidArgument, "unknown allocation weighting '" + std::string(text) + "'");
}

EndpointRule parse_endpoint_rule(std::string_view text) {
  if (text == "sum") return EndpointRule::kSum;
  if (text == "mean") return EndpointRule::kMean;
  throw Error(ErrorCode::kInvalidArgument, "unknown endpoint rule '" + std::string(text) + "'");
}

std::string_view to_string(EdgeWeighting w) {
  return w == EdgeWeighting::kMultiplicity ? "multiplicity" : "inverse_length";
}

std::string_view to_string(EndpointRule r) { return r == EndpointRule::kSum ? "sum" : "mean"; }

std::vector<double> vertex_shares(double count, std::span<const size_t> incident, const CoarseGraph& cg,
                                  EdgeWeighting weighting) {
  std::vector<double> weights(incident.size());
  for (size_t i = 0; i < incident.size(); ++i) {
    const auto& e = cg.edges[incident[i]];
    weights[i] = weighting == EdgeWeighting::kMultiplicity ? static_cast<double>(e.weight)
                                                           : 1.0 / static_cast<double>(e.hop_length);
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<double> shares(incident.size(), 0.0);
  if (incident.empty() || total <= 0.0) return shares;
  double given = 0.0;
  for (size_t i = 0; i + 1 < incident.size(); ++i) {
    shares[i] = count * weights[i] / total;
    given += shares[i];
  }
  // The last share takes the remainder so shares sum to the count.
  shares.back() = count - given;
  return shares;
}

EdgeFlows allocate_edge_flows(std::span<const double> vertex_counts, const CoarseGraph& cg,
                              const AllocationOptions& options) {
  if (vertex_counts.size() != cg.vertex_count())
    throw Error(ErrorCode::kShapeMismatch, "expected " + std::to_string(cg.vertex_count()) + " vertex counts, got " +
                                               std::to_string(vertex_counts.size()));
  EdgeFlows out;
  out.flow.assign(cg.edges.size(), 0.0);
  const auto inc = cg.incidence();
  const double endpoint_scale = options.endpoint == EndpointRule::kSum ? 1.0 : 0.5;
  for (size_t v = 0; v < cg.vertex_count(); ++v) {
    const double c = vertex_counts[v];
    if (c < 0.0 || !std::isfinite(c))
      throw Error(ErrorCode::kInvalidArgument, "vertex count must be finite and >= 0");
    if (inc[v].empty()) {
      if (c > 0.0) {
        out.dangling.push_back(static_cast<uint32_t>(v));
        out.residue += c;
      }
      continue;
    }
    const auto shares = vertex_shares(c, inc[v], cg, options.weighting);
    for (size_t i = 0; i < shares.size(); ++i) out.flow[inc[v][i]] += endpoint_scale * shares[i];
  }
  return out;
}

EdgeFlows allocate_edge_flows(const std::map<std::string, double>& vertex_counts, const CoarseGraph& cg,
                              const AllocationOptions& options) {
  std::vector<double> dense(cg.vertex_count(), 0.0);
  for (const auto& [id, c] : vertex_counts) {
    auto v = cg.find_vertex(id);
    if (!v) throw Error(ErrorCode::kReference, "count given for unknown junction '" + id + "'");
    dense[*v] = c;
  }
  return allocate_edge_flows(dense, cg, options);
}

std::string_view to_string(CongestionState s) {
  switch (s) {
    case CongestionState::kFreeFlow: return "free_flow";
    case CongestionState::kModerate: return "moderate";
    case CongestionState::kHeavy: return "heavy";
  }
  return "unknown";
}

void CongestionThresholds::validate() const {
  if (!(t1 > 0.0 && t1 < t2))
    throw Error(ErrorCode::kInvalidArgument, "congestion thresholds must satisfy 0 < t1 < t2");
}

CongestionState discretize(double flow, const CongestionThresholds& t) {
  if (flow < t.t1) return CongestionState::kFreeFlow;
  if (flow < t.t2) return CongestionState::kModerate;
  return CongestionState::kHeavy;
}

CongestionThresholds calibrate_thresholds(std::vector<double> flows) {
  if (flows.empty()) throw Error(ErrorCode::kInvalidArgument, "no flows to calibrate thresholds from");
  std::sort(flows.begin(), flows.end());
  auto pct = [&](double q) {
    const double pos = q * static_cast<double>(flows.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, flows.size() - 1);
    return flows[lo] + (pos - static_cast<double>(lo)) * (flows[hi] - flows[lo]);
  };
  CongestionThresholds t{pct(0.33), pct(0.66)};
  if (t.t1 <= 0.0) t.t1 = 1e-9;
  if (t.t2 <= t.t1) t.t2 = t.t1 * (1.0 + 1e-9) + 1e-9;
  return t;
}

}  // namespace cityfabric
