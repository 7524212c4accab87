#include "n3d/forge.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "n3d/errors.hpp"

namespace n3d {

std::string to_string(EditOp op) {
  switch (op) {
    case EditOp::Delete: return "delete";
    case EditOp::Add: return "add";
    case EditOp::Modify: return "modify";
  }
  return "?";
}

std::string to_string(Primitive p) {
  switch (p) {
    case Primitive::Box: return "box";
    case Primitive::Sphere: return "sphere";
    case Primitive::Cylinder: return "cylinder";
  }
  return "?";
}

namespace {

int& comp(Int3& p, int axis) { return axis == 0 ? p.x : axis == 1 ? p.y : p.z; }
int comp(const Int3& p, int axis) { return axis == 0 ? p.x : axis == 1 ? p.y : p.z; }

struct SiteAxis {
  int axis;
  int dir;
};

SiteAxis site_axis(Site s) {
  switch (s) {
    case Site::Top: return {1, +1};
    case Site::Bottom: return {1, -1};
    case Site::Left: return {0, -1};
    case Site::Right: return {0, +1};
    case Site::Front: return {2, +1};
    case Site::Back: return {2, -1};
    case Site::None: break;
  }
  throw ContractError("site has no axis");
}

const std::string& site_name(Site s) { return words::sites().at(static_cast<std::size_t>(s)); }

template <typename V>
void shuffle(V& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

constexpr std::array<std::array<int, 3>, 6> kNeighbors{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

}  // namespace

std::vector<std::size_t> rasterize(const Part& p, int r) {
  std::vector<std::size_t> out;
  const double cx = p.origin.x + p.size.x / 2.0, cy = p.origin.y + p.size.y / 2.0, cz = p.origin.z + p.size.z / 2.0;
  const double rx = p.size.x / 2.0, ry = p.size.y / 2.0, rz = p.size.z / 2.0;
  for (int z = p.origin.z; z < p.origin.z + p.size.z; ++z)
    for (int y = p.origin.y; y < p.origin.y + p.size.y; ++y)
      for (int x = p.origin.x; x < p.origin.x + p.size.x; ++x) {
        if (x < 0 || y < 0 || z < 0 || x >= r || y >= r || z >= r) continue;
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry, dz = (z + 0.5 - cz) / rz;
        bool inside = true;
        if (p.primitive == Primitive::Sphere) {
          inside = dx * dx + dy * dy + dz * dz <= 1.0;
        } else if (p.primitive == Primitive::Cylinder) {
          const double d2 = p.axis == 0 ? dy * dy + dz * dz : p.axis == 1 ? dx * dx + dz * dz : dx * dx + dy * dy;
          inside = d2 <= 1.0;
        }
        if (inside)
          out.push_back(static_cast<std::size_t>(x) +
                        static_cast<std::size_t>(r) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(r) * static_cast<std::size_t>(z)));
      }
  return out;
}

const Part* PartAssembly::find(std::string_view name) const {
  for (const auto& p : parts)
    if (p.name == name) return &p;
  return nullptr;
}

OccupancyGrid PartAssembly::grid() const {
  OccupancyGrid g(resolution);
  for (const auto& p : parts)
    for (std::size_t i : rasterize(p, resolution))
      if (!g.occupied(i)) g.set(i, p.material);
  return g;
}

std::vector<std::uint8_t> PartAssembly::exclusive_mask(std::string_view name) const {
  const std::size_t n = static_cast<std::size_t>(resolution) * resolution * resolution;
  std::vector<std::uint8_t> mask(n, 0);
  std::vector<std::uint8_t> others(n, 0);
  bool found = false;
  for (const auto& p : parts) {
    auto& dst = p.name == name ? mask : others;
    found = found || p.name == name;
    for (std::size_t i : rasterize(p, resolution)) dst[i] = 1;
  }
  if (!found) throw ContractError("assembly has no part named '" + std::string(name) + "'");
  for (std::size_t i = 0; i < n; ++i)
    if (others[i]) mask[i] = 0;
  return mask;
}

VoxelObject to_object(const PartAssembly& a) {
  VoxelObject o{a.grid(), {}};
  for (const auto& p : a.parts) o.parts.emplace_back(p.name, a.exclusive_mask(p.name));
  return o;
}

void ForgeSpec::validate() const {
  if (resolution < 16 || resolution > 256) throw ConfigError("forge resolution must lie in [16, 256]");
  if (min_parts < 1 || max_parts > 5 || min_parts > max_parts) throw ConfigError("forge part count must satisfy 1 <= min <= max <= 5");
  if (retry_budget < 1) throw ConfigError("forge retry budget must be positive");
}

// ---- assembly -------------------------------------------------------------------

namespace {

Part random_body(Rng& rng, int r) {
  Part b;
  b.name = words::kBody;
  b.primitive = static_cast<Primitive>(rng.below(3));
  b.axis = static_cast<int>(rng.below(3));
  const int lo = std::max(4, r * 5 / 16), hi = std::max(lo, r / 2);
  for (int a = 0; a < 3; ++a) {
    comp(b.size, a) = rng.range(lo, hi);
    comp(b.origin, a) = (r - comp(b.size, a)) / 2 + rng.range(-1, 1);
  }
  return b;
}

// Slides the part in from the grid edge at `site` until it is face-adjacent to the body.
// Fails on any overlap with occupied voxels.
bool place_part(Part& p, const PartAssembly& a, const std::vector<std::uint8_t>& body, const OccupancyGrid& occ, Rng& rng) {
  const int r = a.resolution;
  const Part& b = a.parts.front();
  const auto [axis, dir] = site_axis(p.site);
  for (int q = 0; q < 3; ++q) {
    if (q == axis) continue;
    const int c = comp(b.origin, q) + rng.range(1, std::max(1, comp(b.size, q) - 2));
    comp(p.origin, q) = std::clamp(c - comp(p.size, q) / 2, 0, r - comp(p.size, q));
  }
  const int body_mid = comp(b.origin, axis) + comp(b.size, axis) / 2;
  int pos = dir > 0 ? r - comp(p.size, axis) : 0;
  for (;; pos -= dir) {
    if (dir > 0 ? pos < body_mid : pos + comp(p.size, axis) > body_mid) return false;
    comp(p.origin, axis) = pos;
    const auto vox = rasterize(p, r);
    if (vox.empty()) return false;
    bool touching = false;
    for (std::size_t i : vox) {
      if (occ.occupied(i)) return false;
      const Int3 c = occ.coords(i);
      for (const auto& n : kNeighbors) {
        const int x = c.x + n[0], y = c.y + n[1], z = c.z + n[2];
        if (occ.in_bounds(x, y, z) && body[occ.index(x, y, z)]) touching = true;
      }
    }
    if (touching) return true;
  }
}

Part random_part(Rng& rng, int r, const std::string& name, Site site, std::uint8_t material) {
  Part p;
  p.name = name;
  p.site = site;
  p.material = material;
  p.primitive = static_cast<Primitive>(rng.below(3));
  const int axis = site_axis(site).axis;
  p.axis = rng.below(2) ? axis : static_cast<int>(rng.below(3));
  for (int q = 0; q < 3; ++q)
    comp(p.size, q) = q == axis ? rng.range(2, std::max(2, r / 8)) : rng.range(2, std::max(2, r * 3 / 16));
  return p;
}

std::vector<std::uint8_t> part_mask(const Part& p, int r) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(r) * r * r, 0);
  for (std::size_t i : rasterize(p, r)) m[i] = 1;
  return m;
}

bool attach(PartAssembly& a, Part p, Rng& rng, int attempts) {
  const auto body = part_mask(a.parts.front(), a.resolution);
  const OccupancyGrid occ = a.grid();
  for (int k = 0; k < attempts; ++k) {
    Part trial = random_part(rng, a.resolution, p.name, p.site, p.material);
    if (place_part(trial, a, body, occ, rng)) {
      a.parts.push_back(trial);
      return true;
    }
  }
  return false;
}

std::vector<Site> free_sites(const PartAssembly& a) {
  std::vector<Site> out;
  for (int s = 0; s < 6; ++s) {
    const Site site = static_cast<Site>(s);
    if (std::none_of(a.parts.begin(), a.parts.end(), [&](const Part& p) { return p.site == site; })) out.push_back(site);
  }
  return out;
}

std::vector<std::uint8_t> unused_materials(const PartAssembly& a) {
  std::vector<std::uint8_t> out;
  for (int m = 1; m <= kMaxMaterial; ++m)
    if (std::none_of(a.parts.begin(), a.parts.end(), [&](const Part& p) { return p.material == m; }))
      out.push_back(static_cast<std::uint8_t>(m));
  return out;
}

}  // namespace

PartAssembly gen_assembly(Rng& rng, const ForgeSpec& spec) {
  spec.validate();
  const int r = spec.resolution;
  for (int attempt = 0; attempt < spec.retry_budget; ++attempt) {
    PartAssembly a;
    a.resolution = r;
    a.body_noun = words::body_nouns()[rng.below(words::body_nouns().size())];
    a.body_adjective = words::body_adjectives()[rng.below(words::body_adjectives().size())];

    std::vector<std::uint8_t> palette;
    for (int m = 1; m <= kMaxMaterial; ++m) palette.push_back(static_cast<std::uint8_t>(m));
    shuffle(palette, rng);
    std::vector<std::string> names = words::part_nouns();
    shuffle(names, rng);
    std::vector<Site> sites{Site::Top, Site::Bottom, Site::Left, Site::Right, Site::Front, Site::Back};
    shuffle(sites, rng);

    Part body = random_body(rng, r);
    body.material = palette[0];
    a.parts.push_back(body);
    const int n = rng.range(spec.min_parts, spec.max_parts);
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      Part p;
      p.name = names[static_cast<std::size_t>(i)];
      p.site = sites[static_cast<std::size_t>(i)];
      p.material = palette[static_cast<std::size_t>(i + 1)];
      ok = attach(a, p, rng, 8);
    }
    if (ok) return a;
  }
  throw GenerationError("part placement failed after " + std::to_string(spec.retry_budget) + " assemblies");
}

std::string caption_assembly(const PartAssembly& a) {
  std::vector<std::string> names;
  for (std::size_t i = 1; i < a.parts.size(); ++i) names.push_back(a.parts[i].name);
  std::sort(names.begin(), names.end());
  std::string s = "a " + a.body_adjective + " " + a.body_noun;
  if (names.empty()) return s;
  s += " with ";
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i > 0) s += i + 1 == names.size() ? " and " : ", ";
    s += names[i];
  }
  return s;
}

std::string format_instruction(EditOp op, std::string_view part, std::string_view caption, std::string_view detail) {
  std::string s;
  switch (op) {
    case EditOp::Delete: s = "delete the " + std::string(part); break;
    case EditOp::Add: s = "add a " + std::string(part) + " on the " + std::string(detail); break;
    case EditOp::Modify: s = "change the " + std::string(part) + " to " + std::string(detail); break;
  }
  s += ", " + std::string(caption);
  for (char c : s)
    if (c >= 'A' && c <= 'Z') throw VocabError("instruction must be lowercase: '" + s + "'");
  const Lexicon& lex = Lexicon::standard();
  if (lex.detokenize(lex.tokenize(s)) != s) throw VocabError("instruction is not single-space separated: '" + s + "'");
  return s;
}

std::optional<ParsedInstruction> parse_instruction(std::string_view text) {
  std::vector<std::string> w;
  {
    std::string cur;
    for (char c : text) {
      if (c == ' ' || c == ',') {
        if (!cur.empty()) w.push_back(cur);
        cur.clear();
        if (c == ',') w.push_back(",");
      } else {
        cur.push_back(c);
      }
    }
    if (!cur.empty()) w.push_back(cur);
  }
  auto comma = std::find(w.begin(), w.end(), ",");
  if (comma == w.end()) return std::nullopt;
  std::vector<std::string> head(w.begin(), comma), tail(comma + 1, w.end());

  ParsedInstruction p;
  auto join = [](auto b, auto e) {
    std::string s;
    for (auto it = b; it != e; ++it) s += (s.empty() ? "" : " ") + *it;
    return s;
  };
  if (head.size() == 3 && head[0] == "delete" && head[1] == "the") {
    p.op = EditOp::Delete;
    p.part = head[2];
  } else if (head.size() >= 6 && head[0] == "add" && head[1] == "a" && head[3] == "on" && head[4] == "the") {
    p.op = EditOp::Add;
    p.part = head[2];
    p.detail = join(head.begin() + 5, head.end());
  } else if (head.size() == 5 && head[0] == "change" && head[1] == "the" && head[3] == "to") {
    p.op = EditOp::Modify;
    p.part = head[2];
    p.detail = head[4];
  } else {
    return std::nullopt;
  }
  if (tail.size() < 3 || tail[0] != "a") return std::nullopt;
  if (tail.size() > 3) {
    if (tail[3] != "with") return std::nullopt;
    for (std::size_t i = 4; i < tail.size(); ++i)
      if (tail[i] != "," && tail[i] != "and") p.caption_parts.push_back(tail[i]);
  }
  return p;
}

// ---- edit pairs -----------------------------------------------------------------

namespace {

void assert_invariants(const EditTriplet& t) {
  const std::size_t n = t.source.size();
  if (t.target.size() != n || t.edit_mask.size() != n) throw ContractError("triplet grids differ in size");
  for (std::size_t i = 0; i < n; ++i) {
    const bool m = t.edit_mask[i] != 0;
    const bool so = t.source.occupied(i), to = t.target.occupied(i);
    if (!m && t.source.material(i) != t.target.material(i)) throw ContractError("triplet differs outside its edit mask");
    switch (t.op) {
      case EditOp::Delete:
        if (m && (!so || to)) throw ContractError("delete mask is not source-occupied and target-empty");
        break;
      case EditOp::Add:
        if (m && (so || !to)) throw ContractError("add mask is not source-empty and target-occupied");
        break;
      case EditOp::Modify:
        if (so != to) throw ContractError("modify changed occupancy");
        break;
    }
  }
}

EditTriplet finish(EditTriplet t) {
  assert_invariants(t);
  return t;
}

std::size_t pick_attached(const PartAssembly& a, Rng& rng) {
  if (a.parts.size() < 2) throw ContractError("assembly needs at least one attached part");
  return 1 + rng.below(a.parts.size() - 1);
}

}  // namespace

EditTriplet make_delete_pair(const PartAssembly& a, Rng& rng) {
  const Part& p = a.parts[pick_attached(a, rng)];
  EditTriplet t;
  t.op = EditOp::Delete;
  t.source = a.grid();
  t.target = t.source;
  t.edit_mask = a.exclusive_mask(p.name);
  for (std::size_t i = 0; i < t.edit_mask.size(); ++i)
    if (t.edit_mask[i]) t.target.set(i, 0);
  t.part_id = Lexicon::standard().id(p.name);
  t.instruction = format_instruction(EditOp::Delete, p.name, caption_assembly(a));
  return finish(std::move(t));
}

EditTriplet make_add_pair(const PartAssembly& a, Rng& rng) {
  const auto sites = free_sites(a);
  if (sites.empty()) throw GenerationError("no free attachment site");
  std::vector<std::string> names;
  for (const auto& n : words::part_nouns())
    if (!a.find(n)) names.push_back(n);
  const auto mats = unused_materials(a);
  if (names.empty() || mats.empty()) throw GenerationError("no unused part name or material");

  Part p;
  p.name = names[rng.below(names.size())];
  p.site = sites[rng.below(sites.size())];
  p.material = mats[rng.below(mats.size())];
  PartAssembly b = a;
  if (!attach(b, p, rng, 16)) throw GenerationError("could not place '" + p.name + "' on the " + site_name(p.site));

  EditTriplet t;
  t.op = EditOp::Add;
  t.source = a.grid();
  t.target = b.grid();
  t.edit_mask = b.exclusive_mask(p.name);
  t.part_id = Lexicon::standard().id(p.name);
  t.instruction = format_instruction(EditOp::Add, p.name, caption_assembly(a), site_name(p.site));
  return finish(std::move(t));
}

EditTriplet make_modify_pair(const PartAssembly& a, Rng& rng) {
  const Part& p = a.parts[pick_attached(a, rng)];
  const auto mats = unused_materials(a);
  if (mats.empty()) throw GenerationError("no unused material");
  const std::uint8_t m = mats[rng.below(mats.size())];

  EditTriplet t;
  t.op = EditOp::Modify;
  t.source = a.grid();
  t.target = t.source;
  t.edit_mask = a.exclusive_mask(p.name);
  for (std::size_t i = 0; i < t.edit_mask.size(); ++i)
    if (t.edit_mask[i]) t.target.set(i, m);
  t.part_id = Lexicon::standard().id(p.name);
  t.instruction = format_instruction(EditOp::Modify, p.name, caption_assembly(a), words::colors()[m - 1u]);
  return finish(std::move(t));
}

// ---- curation -------------------------------------------------------------------

bool CurationResult::has(std::string_view reason) const {
  return std::find(reasons.begin(), reasons.end(), reason) != reasons.end();
}

double masked_iou(const OccupancyGrid& a, const OccupancyGrid& b, const std::vector<std::uint8_t>& mask) {
  if (a.resolution() != b.resolution())
    throw DimensionError("IoU of grids with resolution " + std::to_string(a.resolution()) + " and " +
                         std::to_string(b.resolution()));
  if (!mask.empty() && mask.size() != a.size()) throw DimensionError("edit mask size does not match the grid");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    const bool x = a.occupied(i), y = b.occupied(i);
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t largest_component(const OccupancyGrid& g) {
  std::vector<std::uint8_t> seen(g.size(), 0);
  std::vector<std::size_t> stack;
  std::size_t best = 0;
  for (std::size_t s = 0; s < g.size(); ++s) {
    if (!g.occupied(s) || seen[s]) continue;
    std::size_t count = 0;
    seen[s] = 1;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++count;
      const Int3 c = g.coords(i);
      for (const auto& n : kNeighbors) {
        const int x = c.x + n[0], y = c.y + n[1], z = c.z + n[2];
        if (!g.in_bounds(x, y, z)) continue;
        const std::size_t j = g.index(x, y, z);
        if (g.occupied(j) && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
    best = std::max(best, count);
  }
  return best;
}

namespace {

bool fidelity_ok(const EditTriplet& t) {
  const auto parsed = parse_instruction(t.instruction);
  if (!parsed || parsed->op != t.op) return false;
  const auto id = Lexicon::standard().find(parsed->part);
  if (!id || *id != t.part_id) return false;
  const bool in_caption =
      std::find(parsed->caption_parts.begin(), parsed->caption_parts.end(), parsed->part) != parsed->caption_parts.end();
  if (t.op == EditOp::Add ? in_caption : !in_caption) return false;

  int color = 0;
  if (t.op == EditOp::Modify) {
    const auto& c = words::colors();
    auto it = std::find(c.begin(), c.end(), parsed->detail);
    if (it == c.end()) return false;
    color = static_cast<int>(it - c.begin()) + 1;
  }
  std::size_t masked = 0;
  for (std::size_t i = 0; i < t.edit_mask.size(); ++i) {
    if (!t.edit_mask[i]) continue;
    ++masked;
    const bool so = t.source.occupied(i), to = t.target.occupied(i);
    switch (t.op) {
      case EditOp::Delete:
        if (!so || to) return false;
        break;
      case EditOp::Add:
        if (so || !to) return false;
        break;
      case EditOp::Modify:
        if (!so || !to || t.target.material(i) != color || t.source.material(i) == color) return false;
        break;
    }
  }
  return masked > 0;
}

bool quality_ok(const OccupancyGrid& g) {
  const std::size_t n = g.count();
  if (n < kMinOccupied) return false;
  return static_cast<double>(largest_component(g)) >= kLargestComponentFraction * static_cast<double>(n);
}

}  // namespace

CurationResult curate(const EditTriplet& t) {
  CurationResult r;
  const bool shaped = t.source.resolution() == t.target.resolution() && t.edit_mask.size() == t.source.size();
  if (!shaped || !fidelity_ok(t)) r.reasons.push_back("fidelity");
  if (!shaped || masked_iou(t.source, t.target, t.edit_mask) < kConsistencyIou) r.reasons.push_back("consistency");
  if (!quality_ok(t.source) || !quality_ok(t.target)) r.reasons.push_back("quality");
  r.accept = r.reasons.empty();
  return r;
}

// ---- dataset generation ---------------------------------------------------------

GeneratedTriplet generate_triplet(std::uint64_t seed, EditOp op, std::size_t index, const ForgeSpec& spec) {
  Rng rng = Rng(seed).fork((static_cast<std::uint64_t>(op) << 40) ^ static_cast<std::uint64_t>(index));
  for (int attempt = 0; attempt < spec.retry_budget; ++attempt) {
    PartAssembly a = gen_assembly(rng, spec);
    EditTriplet t;
    try {
      switch (op) {
        case EditOp::Delete: t = make_delete_pair(a, rng); break;
        case EditOp::Add: t = make_add_pair(a, rng); break;
        case EditOp::Modify: t = make_modify_pair(a, rng); break;
      }
    } catch (const GenerationError&) {
      continue;
    }
    if (!curate(t).accept) continue;
    return {std::move(t), to_object(a)};
  }
  throw GenerationError("no curated " + to_string(op) + " triplet for index " + std::to_string(index));
}

std::vector<GeneratedTriplet> generate_dataset(std::uint64_t seed, std::size_t per_op, const ForgeSpec& spec) {
  std::vector<GeneratedTriplet> out;
  out.reserve(3 * per_op);
  for (EditOp op : {EditOp::Delete, EditOp::Add, EditOp::Modify})
    for (std::size_t i = 0; i < per_op; ++i) out.push_back(generate_triplet(seed, op, i, spec));
  return out;
}

}  // namespace n3d
