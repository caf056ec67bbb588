#pragma once
// Static PNG overlays for eyeballing results: instance masks tinted with one
// color each (solid outline, translucent fill, score caption) and panoptic id
// maps as flat colors with a legend strip. Text comes from a built-in 5x7
// bitmap font, so the renders have no dependencies beyond libpng.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "condinst/feature_map.hpp"
#include "condinst/inference.hpp"
#include "condinst/png_io.hpp"
#include "condinst/synthdata.hpp"

namespace condinst {

/// Saturated, well-separated color for index i (golden-angle hue walk).
std::array<uint8_t, 3> palette_color(int index);

/// Pixel width of `text` at the given scale (glyphs are 5 wide + 1 gap).
int text_width(const std::string& text, int scale = 1);

/// Draws 5x7 block glyphs at (x, y) = top-left. Lowercase letters reuse the
/// uppercase shapes. Clips at the image border.
void draw_text(ImageU8& image, int x, int y, const std::string& text,
               std::array<uint8_t, 3> color, int scale = 1);

/// The float image (3 channels, values in [0,1]) as interleaved 8-bit RGB.
ImageU8 image_to_u8(const FeatureMap& image);

/// Predicted instances over the image: per-instance fill at alpha 0.45, a
/// solid 1px outline in the exact palette color, and a "<class> <score>"
/// caption near each mask. An empty list yields the plain image with a
/// "0 instances" caption. Masks must match the image resolution.
ImageU8 render_instances(const FeatureMap& image, const std::vector<InstanceResult>& instances);

/// Ground-truth counterpart: visible masks of a scene, captioned with class
/// ids, same look as render_instances.
ImageU8 render_scene_instances(const SceneAnnotation& scene);

/// Panoptic ids as flat colors (void id 0 = near-black) plus a legend strip
/// appended below: one swatch and caption per segment. Thing categories are
/// named by their shape, stuff categories by index.
ImageU8 render_panoptic(const PanopticMap& map, int num_stuff);

/// A scene's stored panoptic ground truth as a PanopticMap (stuff segments
/// first, then every instance with visible pixels), for rendering and PQ
/// evaluation against predictions.
PanopticMap panoptic_gt_of_scene(const SceneAnnotation& scene);

}  // namespace condinst
