#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace cac {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Height x width x 3 RGB image with float channels in [0, 1], stored HWC.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  bool empty() const { return pixels.empty(); }
  bool operator==(const Image&) const = default;
};

inline cv::Mat to_mat(const Image& img) {
  cv::Mat rgb(img.height, img.width, CV_32FC3, const_cast<float*>(img.pixels.data()));
  return rgb.clone();
}

inline Image from_mat(const cv::Mat& m) {
  cv::Mat f;
  m.convertTo(f, CV_32FC3);
  Image img(f.rows, f.cols);
  for (int y = 0; y < f.rows; ++y) std::copy_n(f.ptr<float>(y), static_cast<size_t>(f.cols) * 3, &img.at(y, 0, 0));
  return img;
}

inline Image load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return from_mat(f);
}

inline cv::Mat to_bgr8(const Image& img) {
  cv::Mat rgb = to_mat(img);
  cv::Mat bgr, out;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  bgr.convertTo(out, CV_8UC3, 255.0);
  return out;
}

inline void save_png(const std::filesystem::path& path, const cv::Mat& bgr8) {
  if (!cv::imwrite(path.string(), bgr8)) throw IoError("cannot write image: " + path.string());
}

inline void save_png(const std::filesystem::path& path, const Image& img) { save_png(path, to_bgr8(img)); }

// Bilinear (area when shrinking) resize to the requested extent.
inline Image resize_image(const Image& img, int height, int width) {
  if (height == img.height && width == img.width) return img;
  cv::Mat src = to_mat(img), dst;
  const bool shrink = height < img.height;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return from_mat(dst);
}

}  // namespace cac
