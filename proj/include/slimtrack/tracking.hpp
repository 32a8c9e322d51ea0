#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include "slimtrack/graph.hpp"

namespace slimtrack {

struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
};

inline double iou(const Box& a, const Box& b) {
  if (a.w < 0 || a.h < 0 || b.w < 0 || b.h < 0)
    throw ShapeError("iou: negative box extent");
  double x1 = std::max(a.x, b.x), y1 = std::max(a.y, b.y);
  double x2 = std::min(a.x + a.w, b.x + b.w), y2 = std::min(a.y + a.h, b.y + b.h);
  double inter = std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1);
  double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Frames are [3,H,W] tensors with values in [0,1].
struct SyntheticSequence {
  std::vector<Tensor> frames;
  std::vector<Box> gt_boxes;
  uint64_t seed = 0;
  int64_t frame_size() const { return frames.empty() ? 0 : frames[0].shape[1]; }
};

namespace detail {
struct SinTexture {
  struct Wave {
    double amp, fx, fy, phase;
  };
  std::vector<Wave> waves;
  double base;
  double eval(double x, double y) const {
    double v = base;
    for (auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
    return std::clamp(v, 0.0, 1.0);
  }
};

inline SinTexture make_texture(Rng& rng, int complexity, double base, double amp_lo, double amp_hi,
                               double freq_lo, double freq_hi) {
  SinTexture t;
  t.base = base;
  for (int i = 0; i < complexity; ++i) {
    SinTexture::Wave w;
    w.amp = rng.uniform(amp_lo, amp_hi);
    w.fx = rng.uniform(freq_lo, freq_hi);
    w.fy = rng.uniform(freq_lo, freq_hi);
    w.phase = rng.uniform(0.0, 6.283185307179586);
    t.waves.push_back(w);
  }
  return t;
}
}  // namespace detail

// A textured patch on a textured background following a bounded random walk.
// Fully reproducible per seed; the object size is constant within a sequence.
inline SyntheticSequence gen_sequence(uint64_t seed, int64_t length, int64_t frame_size,
                                      int64_t obj_min, int64_t obj_max, int64_t motion,
                                      int complexity) {
  if (length < 2) throw ConfigError("gen_sequence: need at least 2 frames");
  Rng rng(seed * 0x9e3779b9ull + 1);
  int64_t size = obj_min == obj_max ? obj_min : obj_min + int64_t(rng.uniform_int(uint64_t(obj_max - obj_min + 1)));
  if (size > frame_size) throw ConfigError("gen_sequence: object size exceeds frame");
  if (size + 2 * motion > frame_size)
    throw ConfigError("gen_sequence: object does not fit with margin >= motion magnitude");
  std::vector<detail::SinTexture> bg, fg;
  for (int c = 0; c < 3; ++c)
    bg.push_back(detail::make_texture(rng, complexity, rng.uniform(0.35, 0.65), 0.04, 0.12,
                                      2.0 * 3.14159265358979 * 1.0 / double(frame_size),
                                      2.0 * 3.14159265358979 * 4.0 / double(frame_size)));
  for (int c = 0; c < 3; ++c)
    fg.push_back(detail::make_texture(rng, complexity + 2, rng.uniform(0.2, 0.8), 0.1, 0.25,
                                      2.0 * 3.14159265358979 * 2.0 / double(size),
                                      2.0 * 3.14159265358979 * 6.0 / double(size)));
  Tensor background = Tensor::zeros({3, frame_size, frame_size});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < frame_size; ++y)
      for (int64_t x = 0; x < frame_size; ++x)
        background.data[size_t((c * frame_size + y) * frame_size + x)] =
            bg[size_t(c)].eval(double(x), double(y));
  int64_t lim = frame_size - size;
  int64_t px = int64_t(rng.uniform_int(uint64_t(lim + 1)));
  int64_t py = int64_t(rng.uniform_int(uint64_t(lim + 1)));
  SyntheticSequence seq;
  seq.seed = seed;
  for (int64_t f = 0; f < length; ++f) {
    if (f > 0 && motion > 0) {
      px += int64_t(rng.uniform_int(uint64_t(2 * motion + 1))) - motion;
      py += int64_t(rng.uniform_int(uint64_t(2 * motion + 1))) - motion;
      px = std::clamp(px, int64_t(0), lim);
      py = std::clamp(py, int64_t(0), lim);
    }
    Tensor frame = background;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
          frame.data[size_t((c * frame_size + py + y) * frame_size + px + x)] =
              fg[size_t(c)].eval(double(x), double(y));
    seq.frames.push_back(std::move(frame));
    seq.gt_boxes.push_back(Box{double(px), double(py), double(size), double(size)});
  }
  return seq;
}

// Crop a [3,h,w] window with the top-left clamped inside the frame.
inline Tensor crop(const Tensor& frame, int64_t left, int64_t top, int64_t w, int64_t h) {
  int64_t fs_h = frame.shape[1], fs_w = frame.shape[2];
  left = std::clamp(left, int64_t(0), std::max(int64_t(0), fs_w - w));
  top = std::clamp(top, int64_t(0), std::max(int64_t(0), fs_h - h));
  Tensor out = Tensor::zeros({1, 3, h, w});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        out.data[size_t((c * h + y) * w + x)] =
            frame.data[size_t((c * fs_h + top + y) * fs_w + left + x)];
  return out;
}

inline Tensor xcorr_plain(const Tensor& tf, const Tensor& sf) {
  Tape tape;
  auto a = tape.leaf(tf, false);
  auto b = tape.leaf(sf, false);
  return xcorr(tape, a, b)->value;
}

struct TrackResult {
  std::vector<Box> boxes;       // one per frame; frame 0 is the given init box
  std::vector<double> ious;     // vs ground truth, per frame
  std::vector<double> center_errors;
};

// SiamFC-style inference loop with a fixed-size box: template from the first
// ground-truth box, search window centered at the previous prediction,
// response argmax mapped back to image coordinates.
inline TrackResult track(ModelGraph& model, const SyntheticSequence& seq,
                         int64_t template_size = 32, int64_t search_size = 64) {
  if (seq.frames.size() < 2) throw ConfigError("track: sequence must have at least 2 frames");
  const Box& init = seq.gt_boxes[0];
  if (init.w <= 0 || init.h <= 0) throw ConfigError("track: degenerate initial box");
  Tensor templ = crop(seq.frames[0], int64_t(std::lround(init.cx())) - template_size / 2,
                      int64_t(std::lround(init.cy())) - template_size / 2, template_size,
                      template_size);
  Tensor tf = forward_eval(model, templ);
  TrackResult res;
  res.boxes.push_back(init);
  res.ious.push_back(1.0);
  res.center_errors.push_back(0.0);
  double cx = init.cx(), cy = init.cy();
  for (size_t f = 1; f < seq.frames.size(); ++f) {
    int64_t left = int64_t(std::lround(cx)) - search_size / 2;
    int64_t top = int64_t(std::lround(cy)) - search_size / 2;
    int64_t fs_w = seq.frames[f].shape[2], fs_h = seq.frames[f].shape[1];
    left = std::clamp(left, int64_t(0), std::max(int64_t(0), fs_w - search_size));
    top = std::clamp(top, int64_t(0), std::max(int64_t(0), fs_h - search_size));
    Tensor search = crop(seq.frames[f], left, top, search_size, search_size);
    Tensor sf = forward_eval(model, search);
    Tensor resp = xcorr_plain(tf, sf);
    int64_t rh = resp.shape[2], rw = resp.shape[3];
    int64_t best = 0;
    for (int64_t i = 1; i < rh * rw; ++i)
      if (resp.data[size_t(i)] > resp.data[size_t(best)]) best = i;
    int64_t bi = best / rw, bj = best % rw;
    // feature-cell -> pixel stride of the backbone
    double stride = double(search_size) / double(sf.shape[3]);
    cx = double(left) + double(bj) * stride + double(template_size) / 2.0;
    cy = double(top) + double(bi) * stride + double(template_size) / 2.0;
    Box pred{cx - init.w / 2.0, cy - init.h / 2.0, init.w, init.h};
    pred.x = std::clamp(pred.x, 0.0, double(fs_w) - pred.w);
    pred.y = std::clamp(pred.y, 0.0, double(fs_h) - pred.h);
    cx = pred.cx();
    cy = pred.cy();
    const Box& gt = seq.gt_boxes[f];
    res.boxes.push_back(pred);
    res.ious.push_back(iou(pred, gt));
    double dx = pred.cx() - gt.cx(), dy = pred.cy() - gt.cy();
    res.center_errors.push_back(std::sqrt(dx * dx + dy * dy));
  }
  return res;
}

struct TrackingMetrics {
  double ao = 0;
  double sr50 = 0;
  double sr75 = 0;
  std::vector<double> success_curve;    // IoU thresholds 0..1 step 0.05
  std::vector<double> precision_curve;  // center-error thresholds 0..50 px
};

// GOT-10k style reduction over all scored frames (init frame excluded).
// SR@t uses strict inequality IoU > t.
inline TrackingMetrics compute_metrics(const std::vector<TrackResult>& results) {
  if (results.empty()) throw ConfigError("compute_metrics: no results");
  std::vector<double> ious, errs;
  for (auto& r : results)
    for (size_t f = 1; f < r.ious.size(); ++f) {
      ious.push_back(r.ious[f]);
      errs.push_back(r.center_errors[f]);
    }
  if (ious.empty()) throw ConfigError("compute_metrics: no scored frames");
  TrackingMetrics m;
  double n = double(ious.size());
  for (double v : ious) m.ao += v;
  m.ao /= n;
  for (int t = 0; t <= 20; ++t) {
    double thr = double(t) * 0.05;
    double s = 0;
    for (double v : ious)
      if (v > thr) s += 1.0;
    m.success_curve.push_back(s / n);
  }
  m.sr50 = m.success_curve[10];
  m.sr75 = m.success_curve[15];
  for (int d = 0; d <= 50; ++d) {
    double s = 0;
    for (double e : errs)
      if (e <= double(d)) s += 1.0;
    m.precision_curve.push_back(s / n);
  }
  return m;
}

struct BenchmarkConfig {
  int sequences = 50;
  int64_t frames = 50;
  int64_t frame_size = 64;
  int64_t obj_min = 16;
  int64_t obj_max = 16;
  int64_t motion = 3;
  int complexity = 4;
  uint64_t seed_base = 0;  // sequence i uses seed_base + i
};

inline TrackingMetrics evaluate_model(ModelGraph& model, const BenchmarkConfig& cfg) {
  std::vector<TrackResult> results;
  for (int i = 0; i < cfg.sequences; ++i) {
    auto seq = gen_sequence(cfg.seed_base + uint64_t(i), cfg.frames, cfg.frame_size, cfg.obj_min,
                            cfg.obj_max, cfg.motion, cfg.complexity);
    results.push_back(track(model, seq));
  }
  return compute_metrics(results);
}

// Portable-pixmap dump plus one "x y w h" line per frame.
inline void export_sequence(const SyntheticSequence& seq, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (size_t f = 0; f < seq.frames.size(); ++f) {
    const Tensor& fr = seq.frames[f];
    int64_t h = fr.shape[1], w = fr.shape[2];
    std::ofstream os(dir + "/frame_" + std::to_string(f) + ".ppm", std::ios::binary);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c) {
          double v = fr.data[size_t((c * h + y) * w + x)];
          os.put(char(int(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5)));
        }
  }
  std::ofstream ann(dir + "/boxes.txt");
  for (auto& b : seq.gt_boxes) ann << b.x << " " << b.y << " " << b.w << " " << b.h << "\n";
}

}  // namespace slimtrack
