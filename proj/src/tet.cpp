#include "lift3d/tet.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace lift3d {

namespace {

constexpr const char* kSdfName = "tet.sdf";
constexpr const char* kDeformName = "tet.deform";

double tet_signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return dot(b - a, cross(c - a, d - a)) / 6.0;
}

// Cumulative-axis orderings of the Kuhn split; every tet contains the cube's
// main diagonal, so the split is face-compatible across neighboring cubes.
constexpr int kAxisPerms[6][3] = {
    {0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0},
};

}  // namespace

TetGrid build_grid(int resolution) {
  if (resolution < 2) throw ConfigError("tet grid resolution must be >= 2");
  TetGrid grid;
  grid.resolution = resolution;
  const int n = resolution;
  grid.cell = 2.0 / (n - 1);
  grid.vertices.resize(static_cast<size_t>(n) * n * n);
  auto vid = [n](int ix, int iy, int iz) { return (ix * n + iy) * n + iz; };
  for (int ix = 0; ix < n; ++ix)
    for (int iy = 0; iy < n; ++iy)
      for (int iz = 0; iz < n; ++iz)
        grid.vertices[vid(ix, iy, iz)] =
            Vec3{-1.0 + grid.cell * ix, -1.0 + grid.cell * iy, -1.0 + grid.cell * iz};

  grid.tets.reserve(static_cast<size_t>(n - 1) * (n - 1) * (n - 1) * 6);
  for (int ix = 0; ix + 1 < n; ++ix)
    for (int iy = 0; iy + 1 < n; ++iy)
      for (int iz = 0; iz + 1 < n; ++iz)
        for (const auto& perm : kAxisPerms) {
          int c[3] = {ix, iy, iz};
          std::array<int, 4> tet;
          tet[0] = vid(c[0], c[1], c[2]);
          for (int k = 0; k < 3; ++k) {
            ++c[perm[k]];
            tet[k + 1] = vid(c[0], c[1], c[2]);
          }
          if (tet_signed_volume(grid.vertices[tet[0]], grid.vertices[tet[1]],
                                grid.vertices[tet[2]], grid.vertices[tet[3]]) < 0.0)
            std::swap(tet[2], tet[3]);
          grid.tets.push_back(tet);
        }
  return grid;
}

void add_tet_params(ParamStore& store, const TetGrid& grid) {
  const int64_t n = grid.vertex_count();
  store.add(kSdfName, {n});
  store.add(kDeformName, {n, 3});
}

void init_sdf_from_density(const VolumeField& field, const TetGrid& grid, ParamStore& store, double sigma_threshold) {
  double* sdf = store.values(kSdfName);
  for (int64_t i = 0; i < grid.vertex_count(); ++i)
    sdf[i] = field.sigma_at(grid.vertices[i]) - sigma_threshold;
}

namespace {

struct DeformedLattice {
  const TetGrid& grid;
  const double* sdf;
  const double* deform;
  double bound;

  Vec3 position(int i) const {
    const double* d = deform + 3 * static_cast<int64_t>(i);
    Vec3 v = grid.vertices[i];
    v.x += std::clamp(d[0], -bound, bound);
    v.y += std::clamp(d[1], -bound, bound);
    v.z += std::clamp(d[2], -bound, bound);
    return v;
  }
};

}  // namespace

TriMesh marching_tets(const TetGrid& grid, const ParamStore& store) {
  const DeformedLattice lat{grid, store.values(kSdfName), store.values(kDeformName),
                            kDeformClampFactor * grid.cell};
  TriMesh mesh;
  std::unordered_map<uint64_t, int> edge_vertex_ids;
  edge_vertex_ids.reserve(4096);

  auto edge_vertex = [&](int ga, int gb) {
    if (ga > gb) std::swap(ga, gb);
    const uint64_t key = (static_cast<uint64_t>(ga) << 32) | static_cast<uint64_t>(gb);
    auto it = edge_vertex_ids.find(key);
    if (it != edge_vertex_ids.end()) return it->second;
    const double sa = lat.sdf[ga], sb = lat.sdf[gb];
    const double lambda = sa / (sa - sb);
    const Vec3 pa = lat.position(ga), pb = lat.position(gb);
    const int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pa * (1.0 - lambda) + pb * lambda);
    mesh.sources.push_back({ga, gb, lambda});
    edge_vertex_ids.emplace(key, id);
    return id;
  };

  auto emit = [&](int v0, int v1, int v2, const Vec3& outward) {
    const Vec3 n = cross(mesh.vertices[v1] - mesh.vertices[v0], mesh.vertices[v2] - mesh.vertices[v0]);
    if (dot(n, outward) < 0.0) std::swap(v1, v2);
    mesh.triangles.push_back({v0, v1, v2});
  };

  int in_ids[4], out_ids[4];
  for (const auto& tet : grid.tets) {
    int n_in = 0, n_out = 0;
    for (int k = 0; k < 4; ++k) {
      if (lat.sdf[tet[k]] >= 0.0)
        in_ids[n_in++] = tet[k];
      else
        out_ids[n_out++] = tet[k];
    }
    if (n_in == 0 || n_out == 0) continue;

    Vec3 cin{}, cout{};
    for (int k = 0; k < n_in; ++k) cin = cin + lat.position(in_ids[k]);
    for (int k = 0; k < n_out; ++k) cout = cout + lat.position(out_ids[k]);
    const Vec3 outward = cout * (1.0 / n_out) - cin * (1.0 / n_in);

    if (n_in == 1) {
      emit(edge_vertex(in_ids[0], out_ids[0]), edge_vertex(in_ids[0], out_ids[1]),
           edge_vertex(in_ids[0], out_ids[2]), outward);
    } else if (n_in == 3) {
      emit(edge_vertex(in_ids[0], out_ids[0]), edge_vertex(in_ids[1], out_ids[0]),
           edge_vertex(in_ids[2], out_ids[0]), outward);
    } else {
      const int q0 = edge_vertex(in_ids[0], out_ids[0]);
      const int q1 = edge_vertex(in_ids[0], out_ids[1]);
      const int q2 = edge_vertex(in_ids[1], out_ids[1]);
      const int q3 = edge_vertex(in_ids[1], out_ids[0]);
      emit(q0, q1, q2, outward);
      emit(q0, q2, q3, outward);
    }
  }
  return mesh;
}

void marching_tets_backward(const TetGrid& grid, const ParamStore& store, const TriMesh& mesh,
                            const std::vector<Vec3>& d_vertices, double* grad) {
  if (mesh.sources.size() != mesh.vertices.size())
    throw ConfigError("mesh has no lattice provenance; cannot backpropagate");
  if (d_vertices.size() != mesh.vertices.size())
    throw ConfigError("d_vertices size does not match mesh");

  const DeformedLattice lat{grid, store.values(kSdfName), store.values(kDeformName),
                            kDeformClampFactor * grid.cell};
  double* g_sdf = grad + store.array(kSdfName).offset;
  double* g_deform = grad + store.array(kDeformName).offset;

  auto add_deform_grad = [&](int gi, const Vec3& dv) {
    const double* d = lat.deform + 3 * static_cast<int64_t>(gi);
    double* g = g_deform + 3 * static_cast<int64_t>(gi);
    const double dvals[3] = {dv.x, dv.y, dv.z};
    for (int k = 0; k < 3; ++k)
      if (std::abs(d[k]) < lat.bound) g[k] += dvals[k];
  };

  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& dp = d_vertices[i];
    if (dp.x == 0.0 && dp.y == 0.0 && dp.z == 0.0) continue;
    const VertexSource& src = mesh.sources[i];
    const double sa = lat.sdf[src.a], sb = lat.sdf[src.b];
    const Vec3 pa = lat.position(src.a), pb = lat.position(src.b);

    add_deform_grad(src.a, dp * (1.0 - src.lambda));
    add_deform_grad(src.b, dp * src.lambda);

    const double d_lambda = dot(dp, pb - pa);
    const double denom = sa - sb;
    g_sdf[src.a] += d_lambda * (-sb) / (denom * denom);
    g_sdf[src.b] += d_lambda * sa / (denom * denom);
  }
}

void export_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  char line[160];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(line, sizeof(line), "v %.9g %.9g %.9g\n", v.x, v.y, v.z);
    out << line;
  }
  for (const auto& t : mesh.triangles) {
    std::snprintf(line, sizeof(line), "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
    out << line;
  }
  out.flush();
  if (!out) throw IoError("failed writing " + path);
}

TriMesh import_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  TriMesh mesh;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw FormatError(path + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string kind;
    if (!(ss >> kind) || kind[0] == '#') continue;
    if (kind == "v") {
      Vec3 v;
      if (!(ss >> v.x >> v.y >> v.z)) fail("expected 3 coordinates after 'v'");
      std::string extra;
      if (ss >> extra) fail("unexpected token '" + extra + "' after vertex");
      mesh.vertices.push_back(v);
    } else if (kind == "f") {
      std::array<int, 3> t;
      std::string tok;
      for (int k = 0; k < 3; ++k) {
        if (!(ss >> tok)) fail("expected 3 indices after 'f'");
        if (tok.find('/') != std::string::npos) fail("only plain vertex indices are supported");
        try {
          size_t used = 0;
          t[k] = std::stoi(tok, &used) - 1;
          if (used != tok.size()) fail("bad face index '" + tok + "'");
        } catch (const std::exception&) {
          fail("bad face index '" + tok + "'");
        }
      }
      std::string extra;
      if (ss >> extra) fail("only triangles are supported");
      mesh.triangles.push_back(t);
    } else {
      fail("unsupported record '" + kind + "'");
    }
  }
  const int nv = static_cast<int>(mesh.vertices.size());
  for (size_t i = 0; i < mesh.triangles.size(); ++i)
    for (int k = 0; k < 3; ++k)
      if (mesh.triangles[i][k] < 0 || mesh.triangles[i][k] >= nv)
        throw FormatError(path + ": face " + std::to_string(i + 1) + " references vertex " +
                          std::to_string(mesh.triangles[i][k] + 1) + " of " + std::to_string(nv));
  return mesh;
}

}  // namespace lift3d
