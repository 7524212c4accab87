#include <cmath>
#include <string>

#include "n3d/errors.hpp"
#include "n3d/eval.hpp"

namespace n3d {

std::string view_name(View v) {
  switch (v) {
    case View::Front: return "front";
    case View::Back: return "back";
    case View::Left: return "left";
    case View::Right: return "right";
    case View::Top: return "top";
  }
  return "?";
}

const std::array<std::array<std::uint8_t, 3>, 16>& material_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 16> p{{
      {0, 0, 0},
      {220, 40, 40},    // red
      {240, 140, 30},   // orange
      {240, 220, 40},   // yellow
      {150, 230, 40},   // lime
      {40, 160, 60},    // green
      {30, 140, 140},   // teal
      {40, 210, 230},   // cyan
      {40, 80, 220},    // blue
      {20, 30, 120},    // navy
      {120, 60, 170},   // purple
      {230, 40, 200},   // magenta
      {250, 160, 190},  // pink
      {130, 80, 40},    // brown
      {128, 128, 128},  // gray
      {245, 245, 245},  // white
  }};
  return p;
}

Image render_view(const OccupancyGrid& obj, View view, const std::vector<std::uint8_t>* highlight) {
  const int r = obj.resolution();
  if (r > 256) throw ContractError("render: resolution " + std::to_string(r) + " exceeds 256");
  if (highlight && highlight->size() != obj.size()) throw DimensionError("render: highlight mask size does not match the grid");
  Image img{r, r, std::vector<std::uint8_t>(static_cast<std::size_t>(r) * r * 3, 0)};
  for (int v = 0; v < r; ++v)
    for (int u = 0; u < r; ++u)
      for (int depth = 0; depth < r; ++depth) {
        int x = 0, y = 0, z = 0;
        switch (view) {
          case View::Front: x = u, y = r - 1 - v, z = r - 1 - depth; break;
          case View::Back: x = r - 1 - u, y = r - 1 - v, z = depth; break;
          case View::Left: x = depth, y = r - 1 - v, z = u; break;
          case View::Right: x = r - 1 - depth, y = r - 1 - v, z = r - 1 - u; break;
          case View::Top: x = u, y = r - 1 - depth, z = v; break;
        }
        const std::size_t i = obj.index(x, y, z);
        if (!obj.occupied(i)) continue;
        std::array<std::uint8_t, 3> c = kHighlightColor;
        if (!highlight || !(*highlight)[i]) {
          const double b = 1.0 - 0.6 * depth / r;
          const auto& base = material_palette()[obj.material(i)];
          for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(base[k] * b));
        }
        const std::size_t p = 3 * (static_cast<std::size_t>(v) * r + static_cast<std::size_t>(u));
        img.rgb[p] = c[0];
        img.rgb[p + 1] = c[1];
        img.rgb[p + 2] = c[2];
        break;
      }
  return img;
}

std::array<Image, 5> render_views(const OccupancyGrid& obj, const std::vector<std::uint8_t>* highlight) {
  std::array<Image, 5> out;
  for (std::size_t k = 0; k < kViews.size(); ++k) out[k] = render_view(obj, kViews[k], highlight);
  return out;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

void write_ppm(const Image& img, const std::string& path) { write_file(path, encode_ppm(img)); }

}  // namespace n3d
