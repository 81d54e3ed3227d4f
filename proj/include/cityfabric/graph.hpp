#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace cityfabric {

struct RoadVertex {
  std::string id;
  bool camera = false;
  std::optional<double> x;
  std::optional<double> y;
  bool operator==(const RoadVertex&) const = default;
};

// Undirected road graph; parallel edges are allowed, self-loops are not.
struct RoadGraph {
  std::vector<RoadVertex> vertices;
  std::vector<std::pair<uint32_t, uint32_t>> edges;

  std::optional<uint32_t> find(std::string_view id) const;
  void validate() const;
  bool operator==(const RoadGraph&) const = default;
};

RoadGraph road_graph_from_json(const nlohmann::json& j);
nlohmann::json road_graph_to_json(const RoadGraph& g);

struct SuperEdge {
  uint32_t u = 0;  // coarse vertex indices, u < v
  uint32_t v = 0;
  uint32_t weight = 1;      // number of distinct collapsed paths
  uint32_t hop_length = 1;  // segments on the shortest collapsed path
  bool operator==(const SuperEdge&) const = default;
};

// Camera junctions only, joined by super-edges.
struct CoarseGraph {
  std::vector<std::string> vertex_ids;
  std::vector<std::optional<std::pair<double, double>>> layout;
  std::vector<SuperEdge> edges;  // sorted by (u, v)

  size_t vertex_count() const noexcept { return vertex_ids.size(); }
  std::optional<uint32_t> find_vertex(std::string_view id) const;
  std::optional<size_t> find_edge(uint32_t a, uint32_t b) const;
  std::vector<std::vector<size_t>> incidence() const;
  std::string edge_name(size_t e) const;  // "<u>--<v>"
  std::optional<size_t> find_edge_by_name(std::string_view name) const;
  bool operator==(const CoarseGraph&) const = default;
};

// Collapses every path whose interior vertices are camera-less with degree 2
// into a super-edge between its camera endpoints. Camera-less vertices of any
// other degree end a path without producing an edge; loops back to the same
// camera are dropped. Throws IsolatedCameraVertex if a camera ends up with no
// super-edge.
CoarseGraph coarsen(const RoadGraph& g);

// Expands each super-edge into `weight` disjoint camera-less paths of
// `hop_length` segments, so coarsen(expand_to_road_graph(cg)) == cg.
RoadGraph expand_to_road_graph(const CoarseGraph& cg);

nlohmann::json coarse_graph_to_json(const CoarseGraph& cg);

enum class EdgeWeighting { kMultiplicity, kInverseLength };
enum class EndpointRule { kSum, kMean };

struct AllocationOptions {
  EdgeWeighting weighting = EdgeWeighting::kMultiplicity;
  EndpointRule endpoint = EndpointRule::kSum;
};

EdgeWeighting parse_weighting(std::string_view text);
EndpointRule parse_endpoint_rule(std::string_view text);
std::string_view to_string(EdgeWeighting w);
std::string_view to_string(EndpointRule r);

struct EdgeFlows {
  std::vector<double> flow;  // per super-edge, CoarseGraph edge order
  double residue = 0.0;      // counts held at dangling vertices
  std::vector<uint32_t> dangling;
};

// Each vertex spreads its count over incident super-edges in proportion to
// their weight; an edge's flow combines the shares from both endpoints.
// Under EndpointRule::kSum, sum(flow) + residue == sum(counts).
EdgeFlows allocate_edge_flows(std::span<const double> vertex_counts, const CoarseGraph& cg,
                              const AllocationOptions& options = {});
EdgeFlows allocate_edge_flows(const std::map<std::string, double>& vertex_counts, const CoarseGraph& cg,
                              const AllocationOptions& options = {});

// Share of vertex v's count sent to each of its incident edges, in incidence order.
std::vector<double> vertex_shares(double count, std::span<const size_t> incident, const CoarseGraph& cg,
                                  EdgeWeighting weighting);

enum class CongestionState : uint8_t { kFreeFlow = 0, kModerate = 1, kHeavy = 2 };

std::string_view to_string(CongestionState s);

struct CongestionThresholds {
  double t1 = 30.0;
  double t2 = 80.0;
  void validate() const;
  bool operator==(const CongestionThresholds&) const = default;
};

// flow < t1 -> FreeFlow; t1 <= flow < t2 -> Moderate; flow >= t2 -> Heavy.
CongestionState discretize(double flow, const CongestionThresholds& t);

// 33rd / 66th percentiles of observed edge flows.
CongestionThresholds calibrate_thresholds(std::vector<double> flows);

}  // namespace cityfabric
