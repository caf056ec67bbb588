#include "condinst/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace condinst {

namespace {

// 5x7 glyphs, one byte per row, bit 4 = leftmost column. Lowercase input is
// folded onto the uppercase shapes before lookup.
const uint8_t* glyph_rows(char c) {
    static const uint8_t box[7] = {0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F};
    static const uint8_t space[7] = {0, 0, 0, 0, 0, 0, 0};
    static const uint8_t letters[26][7] = {
        {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // A
        {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},  // B
        {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E},  // C
        {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E},  // D
        {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F},  // E
        {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},  // F
        {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F},  // G
        {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},  // H
        {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E},  // I
        {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},  // J
        {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11},  // K
        {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},  // L
        {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11},  // M
        {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},  // N
        {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},  // O
        {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},  // P
        {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D},  // Q
        {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},  // R
        {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E},  // S
        {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},  // T
        {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},  // U
        {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},  // V
        {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11},  // W
        {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},  // X
        {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04},  // Y
        {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F},  // Z
    };
    static const uint8_t digits[10][7] = {
        {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
        {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
        {0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F},  // 2
        {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
        {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
        {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
        {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
        {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
        {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
        {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
    };
    static const std::map<char, std::array<uint8_t, 7>> punct = {
        {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},
        {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
        {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
        {'-', {0, 0, 0, 0x0E, 0, 0, 0}},
        {'=', {0, 0, 0x0E, 0, 0x0E, 0, 0}},
        {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},
        {'%', {0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13}},
        {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
        {'_', {0, 0, 0, 0, 0, 0, 0x1F}},
        {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
        {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    };
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    if (c >= 'A' && c <= 'Z') return letters[c - 'A'];
    if (c >= '0' && c <= '9') return digits[c - '0'];
    if (c == ' ') return space;
    auto it = punct.find(c);
    return it != punct.end() ? it->second.data() : box;
}

void put_pixel(ImageU8& image, int x, int y, std::array<uint8_t, 3> color) {
    if (x < 0 || y < 0 || x >= image.width || y >= image.height) return;
    uint8_t* p = image.data.data() + (static_cast<size_t>(y) * image.width + x) * image.channels;
    for (int c = 0; c < image.channels; ++c) p[c] = color[c % 3];
}

std::array<uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp) % 6) {
        case 0: r = c, g = x; break;
        case 1: r = x, g = c; break;
        case 2: g = c, b = x; break;
        case 3: g = x, b = c; break;
        case 4: r = x, b = c; break;
        default: r = c, b = x; break;
    }
    const double m = v - c;
    auto q = [&](double u) { return static_cast<uint8_t>(std::lround((u + m) * 255.0)); };
    return {q(r), q(g), q(b)};
}

// Solid-color caption with a one-pixel black drop shadow for legibility.
void draw_caption(ImageU8& image, int x, int y, const std::string& text,
                  std::array<uint8_t, 3> color) {
    draw_text(image, x + 1, y + 1, text, {0, 0, 0});
    draw_text(image, x, y, text, color);
}

// Tint + outline + caption for one binary mask; the outline uses the exact
// palette color so overlays are countable from a pixel histogram.
void overlay_mask(ImageU8& canvas, const BinaryMask& mask, std::array<uint8_t, 3> color,
                  const std::string& label) {
    require(mask.width == canvas.width && mask.height == canvas.height, ErrorKind::usage,
            "overlay mask resolution does not match the image");
    int min_x = mask.width, min_y = mask.height;
    bool any = false;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.at(y, x)) continue;
            any = true;
            min_x = std::min(min_x, x);
            min_y = std::min(min_y, y);
            uint8_t* p =
                canvas.data.data() + (static_cast<size_t>(y) * canvas.width + x) * canvas.channels;
            for (int c = 0; c < 3; ++c)
                p[c] = static_cast<uint8_t>(std::lround(0.55 * p[c] + 0.45 * color[c]));
        }
    if (!any) return;
    auto fg = [&](int y, int x) {
        return y >= 0 && x >= 0 && y < mask.height && x < mask.width && mask.at(y, x) != 0;
    };
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x) &&
                (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)))
                put_pixel(canvas, x, y, color);
    const int ty = min_y >= 9 ? min_y - 9 : min_y + 1;
    draw_caption(canvas, std::max(1, min_x), ty, label, color);
}

}  // namespace

std::array<uint8_t, 3> palette_color(int index) {
    // Golden-angle hue walk with two brightness tiers keeps neighbors apart.
    const double h = std::fmod(0.137 + index * 0.61803398875, 1.0);
    const double v = index % 2 == 0 ? 0.95 : 0.72;
    return hsv_to_rgb(h, 0.80, v);
}

int text_width(const std::string& text, int scale) {
    return text.empty() ? 0 : static_cast<int>(text.size()) * 6 * scale - scale;
}

void draw_text(ImageU8& image, int x, int y, const std::string& text,
               std::array<uint8_t, 3> color, int scale) {
    int cx = x;
    for (char ch : text) {
        const uint8_t* rows = glyph_rows(ch);
        for (int r = 0; r < 7; ++r)
            for (int c = 0; c < 5; ++c) {
                if (!(rows[r] & (1 << (4 - c)))) continue;
                for (int sy = 0; sy < scale; ++sy)
                    for (int sx = 0; sx < scale; ++sx)
                        put_pixel(image, cx + c * scale + sx, y + r * scale + sy, color);
            }
        cx += 6 * scale;
    }
}

ImageU8 image_to_u8(const FeatureMap& image) {
    require(image.channels == 3, ErrorKind::usage, "expected a 3-channel image to render");
    ImageU8 out(image.width, image.height, 3);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                out.data[(static_cast<size_t>(y) * image.width + x) * 3 + c] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return out;
}

ImageU8 render_instances(const FeatureMap& image, const std::vector<InstanceResult>& instances) {
    ImageU8 canvas = image_to_u8(image);
    if (instances.empty()) {
        draw_caption(canvas, 2, 2, "0 instances", {255, 255, 255});
        return canvas;
    }
    for (size_t i = 0; i < instances.size(); ++i) {
        char label[32];
        std::snprintf(label, sizeof label, "c%d %.2f", instances[i].cls, instances[i].score);
        overlay_mask(canvas, instances[i].binary, palette_color(static_cast<int>(i)), label);
    }
    return canvas;
}

ImageU8 render_scene_instances(const SceneAnnotation& scene) {
    ImageU8 canvas = image_to_u8(scene.image);
    if (scene.instances.empty()) {
        draw_caption(canvas, 2, 2, "0 instances", {255, 255, 255});
        return canvas;
    }
    for (size_t i = 0; i < scene.instances.size(); ++i) {
        char label[16];
        std::snprintf(label, sizeof label, "c%d", scene.instances[i].shape.class_id);
        overlay_mask(canvas, scene.instances[i].visible_mask, palette_color(static_cast<int>(i)),
                     label);
    }
    return canvas;
}

ImageU8 render_panoptic(const PanopticMap& map, int num_stuff) {
    require(map.height > 0 && map.width > 0, ErrorKind::usage, "empty panoptic map");
    std::map<int, const PanopticSegment*> by_id;
    for (const PanopticSegment& s : map.segments) by_id[s.id] = &s;

    auto color_of = [&](int id) -> std::array<uint8_t, 3> {
        if (id == 0) return {24, 24, 24};
        auto it = by_id.find(id);
        const bool thing = it != by_id.end() && it->second->is_thing;
        // Things saturated, stuff washed out, so the two read differently.
        const double h = std::fmod(0.137 + id * 0.61803398875, 1.0);
        return thing ? hsv_to_rgb(h, 0.85, 0.95) : hsv_to_rgb(h, 0.35, 0.62);
    };

    const int legend_h = 4 + 11 * static_cast<int>(map.segments.size());
    ImageU8 out(map.width, map.height + legend_h, 3);
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x)
            put_pixel(out, x, y, color_of(map.ids[static_cast<size_t>(y) * map.width + x]));

    for (int y = map.height; y < out.height; ++y)
        for (int x = 0; x < map.width; ++x) put_pixel(out, x, y, {40, 40, 40});
    int ly = map.height + 2;
    for (const PanopticSegment& s : map.segments) {
        for (int y = 0; y < 9; ++y)
            for (int x = 0; x < 9; ++x) put_pixel(out, 2 + x, ly + y, color_of(s.id));
        char caption[48];
        if (s.category == 0)
            std::snprintf(caption, sizeof caption, "%d void", s.id);
        else if (s.is_thing)
            std::snprintf(caption, sizeof caption, "%d %s", s.id,
                          shape_kind_name(shape_kind_for_class(s.category - num_stuff)));
        else
            std::snprintf(caption, sizeof caption, "%d stuff%d", s.id, s.category);
        draw_caption(out, 14, ly + 1, caption, {235, 235, 235});
        ly += 11;
    }
    return out;
}

PanopticMap panoptic_gt_of_scene(const SceneAnnotation& scene) {
    PanopticMap out;
    out.height = scene.height();
    out.width = scene.width();
    out.ids = scene.panoptic;
    std::map<int, size_t> areas;
    for (uint16_t id : out.ids) ++areas[id];
    for (int c = 1; c <= scene.num_stuff; ++c) {
        auto it = areas.find(c);
        if (it == areas.end()) continue;
        PanopticSegment seg;
        seg.id = c;
        seg.category = c;
        seg.is_thing = false;
        seg.area = it->second;
        out.segments.push_back(seg);
    }
    for (size_t i = 0; i < scene.instances.size(); ++i) {
        const int id = scene.instance_panoptic_id(static_cast<int>(i));
        auto it = areas.find(id);
        if (it == areas.end()) continue;  // fully occluded: no visible pixels to own
        PanopticSegment seg;
        seg.id = id;
        seg.category = scene.num_stuff + scene.instances[i].shape.class_id;
        seg.is_thing = true;
        seg.instance_index = static_cast<int>(i);
        seg.score = 1.0;
        seg.area = it->second;
        out.segments.push_back(seg);
    }
    return out;
}

}  // namespace condinst
