#include "lipsync/visual.hpp"

#include <cstdio>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <png.h>

namespace lipsync::visual {
namespace {

namespace F = torch::nn::functional;

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
}

void check_mask(const torch::Tensor& frame, const torch::Tensor& mask, const char* what) {
  if (mask.dim() != 2 || frame.dim() < 2 || frame.size(-2) != mask.size(0) ||
      frame.size(-1) != mask.size(1)) {
    std::ostringstream os;
    os << what << ": mask " << mask.sizes() << " does not match frame " << frame.sizes();
    throw std::invalid_argument(os.str());
  }
}

void check_box(const Box& box, int64_t height, int64_t width) {
  if (box.width <= 0 || box.height <= 0 || box.x < 0 || box.y < 0 ||
      box.x + box.width > width || box.y + box.height > height) {
    std::ostringstream os;
    os << "crop box (" << box.x << "," << box.y << "," << box.width << "," << box.height
       << ") outside " << width << "x" << height << " image";
    throw std::out_of_range(os.str());
  }
}

torch::Tensor resize(const torch::Tensor& chw, int64_t height, int64_t width) {
  if (chw.size(1) == height && chw.size(2) == width) {
    return chw.clone();
  }
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{height, width})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) {
      std::fclose(f);
    }
  }
};

}  // namespace

torch::Tensor lower_half_mask(int height, int width) {
  if (height < 2 || width < 2) {
    throw std::invalid_argument("lower_half_mask: need h, w >= 2");
  }
  auto m = torch::zeros({height, width}, torch::kFloat32);
  m.slice(0, height / 2, height).fill_(1.0);
  return m;
}

torch::Tensor noise_mask(const torch::Tensor& frame, const torch::Tensor& mask,
                         const torch::Tensor& eta) {
  check_same_shape(frame, eta, "noise_mask");
  check_mask(frame, mask, "noise_mask");
  return torch::where(mask > 0.5, eta, frame);
}

torch::Tensor forward_mask_noise(const torch::Tensor& frame, const torch::Tensor& mask,
                                 diffusion::StepIndex t, const torch::Tensor& eps,
                                 const diffusion::NoiseSchedule& sched) {
  check_mask(frame, mask, "forward_mask_noise");
  if (t.value < 1) {
    throw std::invalid_argument("forward_mask_noise: t must be >= 1");
  }
  return torch::where(mask > 0.5, diffusion::forward_sample(frame, t, eps, sched), frame);
}

torch::Tensor forward_mask_noise(const torch::Tensor& frames, const torch::Tensor& mask,
                                 const torch::Tensor& t, const torch::Tensor& eps,
                                 const diffusion::NoiseSchedule& sched) {
  check_mask(frames, mask, "forward_mask_noise");
  auto noised = diffusion::forward_sample(frames, sched.alpha_bar(t), eps);
  return torch::where(mask > 0.5, noised, frames);
}

torch::Tensor composite(const torch::Tensor& gen, const torch::Tensor& orig,
                        const torch::Tensor& mask) {
  check_same_shape(gen, orig, "composite");
  check_mask(orig, mask, "composite");
  return torch::where(mask > 0.5, gen, orig);
}

torch::Tensor crop_resize(const torch::Tensor& image, const Box& box, int size) {
  if (image.dim() != 3) {
    throw std::invalid_argument("crop_resize: expected [3, H, W] image");
  }
  check_box(box, image.size(1), image.size(2));
  auto crop = image.slice(1, box.y, box.y + box.height).slice(2, box.x, box.x + box.width);
  return resize(crop, size, size);
}

torch::Tensor paste_back(const torch::Tensor& crop, const Box& box, const torch::Tensor& image) {
  if (image.dim() != 3 || crop.dim() != 3) {
    throw std::invalid_argument("paste_back: expected [3, H, W] tensors");
  }
  check_box(box, image.size(1), image.size(2));
  auto out = image.clone();
  out.slice(1, box.y, box.y + box.height)
      .slice(2, box.x, box.x + box.width)
      .copy_(resize(crop, box.height, box.width));
  return out;
}

torch::Tensor to_unit_range(const torch::Tensor& bytes) {
  return bytes.to(torch::kFloat32) / 127.5f - 1.0f;
}

torch::Tensor to_bytes(const torch::Tensor& frame) {
  return ((frame.detach().to(torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5)
      .round()
      .to(torch::kUInt8);
}

torch::Tensor read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) {
    throw std::runtime_error("png: cannot open " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: decode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_expand(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  std::vector<uint8_t> buf(static_cast<size_t>(width) * height * 3);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) {
    rows[y] = buf.data() + static_cast<size_t>(y) * width * 3;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  auto hwc = torch::from_blob(buf.data(), {static_cast<int64_t>(height), static_cast<int64_t>(width), 3},
                              torch::kUInt8);
  return to_unit_range(hwc.permute({2, 0, 1}).contiguous());
}

void write_png(const std::filesystem::path& path, const torch::Tensor& frame) {
  if (frame.dim() != 3 || frame.size(0) != 3) {
    throw std::invalid_argument("write_png: expected [3, H, W] frame");
  }
  auto hwc = to_bytes(frame).permute({1, 2, 0}).contiguous();
  const auto height = static_cast<png_uint_32>(hwc.size(0));
  const auto width = static_cast<png_uint_32>(hwc.size(1));
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) {
    throw std::runtime_error("png: cannot write " + path.string());
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: encode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* data = hwc.data_ptr<uint8_t>();
  for (png_uint_32 y = 0; y < height; ++y) {
    png_write_row(png, data + static_cast<size_t>(y) * width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace lipsync::visual
