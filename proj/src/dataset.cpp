#include "ddae/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include "ddae/error.hpp"

namespace ddae {

// ---------------------------------------------------------------- CIFAR ----

ImageBatch decode_cifar10_records(const std::string& bytes, const std::string& origin, int max_records) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t whole = bytes.size() / kCifarRecordBytes;
    throw DataError(origin + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                    std::to_string(kCifarRecordBytes) + "; trailing partial record starts at byte offset " +
                    std::to_string(whole * kCifarRecordBytes));
  }
  int n = static_cast<int>(bytes.size() / kCifarRecordBytes);
  if (max_records >= 0) n = std::min(n, max_records);
  ImageBatch out;
  out.num_classes = 10;
  out.data = Tensor({n, 3, 32, 32});
  out.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t rec = static_cast<std::size_t>(i) * kCifarRecordBytes;
    const auto label = static_cast<unsigned char>(bytes[rec]);
    if (label >= 10)
      throw DataError(origin + ": label " + std::to_string(label) + " at byte offset " + std::to_string(rec) +
                      " outside [0, 10)");
    out.labels[static_cast<std::size_t>(i)] = label;
    float* dst = out.data.data() + static_cast<std::size_t>(i) * 3072;
    for (std::size_t j = 0; j < 3072; ++j)
      dst[j] = static_cast<float>(static_cast<unsigned char>(bytes[rec + 1 + j])) / 127.5f - 1.0f;
  }
  return out;
}

namespace {
std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}
}  // namespace

ImageBatch load_cifar10_binary(const std::filesystem::path& path, int max_records) {
  return decode_cifar10_records(read_file(path), path.string(), max_records);
}

Dataset load_cifar10_dir(const std::filesystem::path& dir, int max_train, int max_test) {
  std::vector<Tensor> parts;
  std::vector<int> labels;
  int have = 0;
  for (int b = 1; b <= 5; ++b) {
    if (max_train >= 0 && have >= max_train) break;
    const auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
    ImageBatch part = load_cifar10_binary(p, max_train >= 0 ? max_train - have : -1);
    have += part.size();
    parts.push_back(std::move(part.data));
    labels.insert(labels.end(), part.labels.begin(), part.labels.end());
  }
  Dataset ds;
  ds.train.data = concat_rows(parts);
  ds.train.labels = std::move(labels);
  ds.train.num_classes = 10;
  const auto test_path = dir / "test_batch.bin";
  if (std::filesystem::exists(test_path)) ds.test = load_cifar10_binary(test_path, max_test);
  return ds;
}

// ------------------------------------------------------------------ PNG ----

namespace {

struct PngImage {
  int width = 0, height = 0;
  std::vector<unsigned char> rgb;  // width*height*3
};

PngImage decode_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError("cannot open '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed for '" + path.string() + "'");
  }
  PngImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "' is not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(img.width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "': unsupported PNG pixel layout");
  }
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] = img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void encode_png(const std::filesystem::path& path, int width, int height, const std::vector<unsigned char>& rgb) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed for '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

ImageBatch load_png_directory(const std::filesystem::path& dir, const std::filesystem::path& labels_csv,
                              int image_size, int channels) {
  if (image_size <= 0) throw ParameterError("image_size must be positive");
  if (channels != 1 && channels != 3) throw ParameterError("PNG ingestion supports 1 or 3 channels");
  std::ifstream f(labels_csv);
  if (!f) throw IoError("cannot open label file '" + labels_csv.string() + "'");
  std::vector<std::pair<std::string, int>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0)
      throw DataError(labels_csv.string() + ":" + std::to_string(lineno) + ": expected 'filename,label'");
    const std::string name = line.substr(0, comma);
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      if (lineno == 1 && rows.empty()) continue;  // header row
      throw DataError(labels_csv.string() + ":" + std::to_string(lineno) + ": label is not an integer");
    }
    if (label < 0) throw DataError(labels_csv.string() + ":" + std::to_string(lineno) + ": negative label");
    rows.emplace_back(name, label);
  }

  ImageBatch out;
  out.data = Tensor({static_cast<int>(rows.size()), channels, image_size, image_size});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto path = dir / rows[i].first;
    if (!std::filesystem::exists(path)) throw IoError("missing image '" + path.string() + "'");
    const PngImage img = decode_png(path);
    const int side = std::min(img.width, img.height);
    const int x0 = (img.width - side) / 2, y0 = (img.height - side) / 2;
    const double scale = static_cast<double>(side) / image_size;
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
          // Bilinear sample at the output pixel centre within the crop.
          const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, side - 1.0);
          const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, side - 1.0);
          const int iy = static_cast<int>(sy), ix = static_cast<int>(sx);
          const int iy1 = std::min(iy + 1, side - 1), ix1 = std::min(ix + 1, side - 1);
          const double fy = sy - iy, fx = sx - ix;
          auto px = [&](int yy, int xx) {
            const std::size_t base = (static_cast<std::size_t>(y0 + yy) * img.width + (x0 + xx)) * 3;
            if (channels == 3) return static_cast<double>(img.rgb[base + static_cast<std::size_t>(c)]);
            return (img.rgb[base] + img.rgb[base + 1] + img.rgb[base + 2]) / 3.0;
          };
          const double v = (1 - fy) * ((1 - fx) * px(iy, ix) + fx * px(iy, ix1)) +
                           fy * ((1 - fx) * px(iy1, ix) + fx * px(iy1, ix1));
          out.data.at(static_cast<int>(i), c, y, x) = static_cast<float>(v / 127.5 - 1.0);
        }
    out.labels.push_back(rows[i].second);
    out.num_classes = std::max(out.num_classes, rows[i].second + 1);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& images, int index) {
  if (images.ndim() != 4 || index < 0 || index >= images.dim(0))
    throw ContractError("write_png expects an NCHW batch and a valid index");
  const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const float u = std::clamp((images.at(index, c == 3 ? ch : 0, y, x) + 1.0f) * 127.5f, 0.0f, 255.0f);
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + static_cast<std::size_t>(ch)] =
            static_cast<unsigned char>(std::lround(u));
      }
  encode_png(path, w, h, rgb);
}

void write_png_grid(const std::filesystem::path& path, const Tensor& images, int columns) {
  if (images.ndim() != 4 || images.dim(0) == 0) throw ContractError("write_png_grid expects a non-empty NCHW batch");
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  columns = std::max(1, std::min(columns, n));
  const int rows = (n + columns - 1) / columns;
  const int pad = 2;
  const int W = columns * (w + pad) + pad, H = rows * (h + pad) + pad;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(W) * H * 3, 255);
  for (int i = 0; i < n; ++i) {
    const int gx = pad + (i % columns) * (w + pad), gy = pad + (i / columns) * (h + pad);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          const float v = images.at(i, c == 3 ? ch : 0, y, x);
          const float u = std::clamp((v + 1.0f) * 127.5f, 0.0f, 255.0f);
          rgb[(static_cast<std::size_t>(gy + y) * W + (gx + x)) * 3 + static_cast<std::size_t>(ch)] =
              static_cast<unsigned char>(std::lround(u));
        }
  }
  encode_png(path, W, H, rgb);
}

// ------------------------------------------------------------ synthetic ----

ImageBatch make_synthetic_shapes(int n, int image_size, std::uint64_t seed) {
  if (n < 0 || image_size < 8) throw ParameterError("synthetic shapes need n >= 0 and image_size >= 8");
  Rng rng(seed);
  ImageBatch out;
  out.num_classes = 10;
  out.data = Tensor({n, 3, image_size, image_size});
  out.labels.resize(static_cast<std::size_t>(n));
  const double S = image_size;
  for (int i = 0; i < n; ++i) {
    const int cls = i % 10;
    out.labels[static_cast<std::size_t>(i)] = cls;
    const double r = S * (0.22 + 0.12 * rng.uniform());
    const double cx = r + 1 + (S - 2 * r - 2) * rng.uniform();
    const double cy = r + 1 + (S - 2 * r - 2) * rng.uniform();
    double bg[3], fg[3];
    for (int c = 0; c < 3; ++c) {
      bg[c] = 1.6 * rng.uniform() - 0.8;
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      fg[c] = std::clamp(bg[c] + sign * (0.5 + 0.5 * rng.uniform()), -1.0, 1.0);
    }
    const double th = 0.18 * r + 0.6;  // stroke half-width
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double ax = std::abs(dx), ay = std::abs(dy), d = std::hypot(dx, dy);
        bool on = false;
        switch (cls) {
          case 0: on = d <= r; break;
          case 1: on = std::abs(d - 0.75 * r) <= th; break;
          case 2: on = std::max(ax, ay) <= 0.8 * r; break;
          case 3: on = std::abs(std::max(ax, ay) - 0.7 * r) <= th; break;
          case 4: on = dy <= 0.7 * r && dy >= -0.9 * r + 2.0 * ax; break;
          case 5: on = (ax <= th && ay <= r) || (ay <= th && ax <= r); break;
          case 6: on = std::abs(ax - ay) <= 1.2 * th && d <= 1.1 * r; break;
          case 7: on = ax <= r && ay <= r && static_cast<int>(std::floor((dy + r) / (0.5 * r))) % 2 == 0; break;
          case 8: on = ax <= r && ay <= r && static_cast<int>(std::floor((dx + r) / (0.5 * r))) % 2 == 0; break;
          case 9: on = ax + ay <= r; break;
        }
        for (int c = 0; c < 3; ++c) {
          const double v = (on ? fg[c] : bg[c]) + 0.05 * rng.normal();
          out.data.at(i, c, y, x) = static_cast<float>(std::clamp(v, -1.0, 1.0));
        }
      }
  }
  return out;
}

// ---------------------------------------------------------- augmentation ---

Tensor augment(const Tensor& images, bool horizontal_flip, bool pad_crop, Rng& rng) {
  if (!horizontal_flip && !pad_crop) return images;
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const int pad = std::max(1, h / 8);
  Tensor out(images.shape());
  for (int i = 0; i < n; ++i) {
    const bool flip = horizontal_flip && rng.uniform() < 0.5;
    const int oy = pad_crop ? rng.uniform_int(-pad, pad) : 0;
    const int ox = pad_crop ? rng.uniform_int(-pad, pad) : 0;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y + oy;
          int sx = x + ox;
          if (flip) sx = w - 1 - sx;
          out.at(i, ch, y, x) = (sy < 0 || sy >= h || sx < 0 || sx >= w) ? -1.0f : images.at(i, ch, sy, sx);
        }
  }
  return out;
}

HoldoutIndices holdout_indices(int n, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw ParameterError("holdout fraction must lie in (0, 1)");
  if (n < 2) throw DataError("need at least 2 rows to hold out a split");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  const int n_test = std::clamp(static_cast<int>(std::lround(n * holdout_fraction)), 1, n - 1);
  HoldoutIndices h;
  h.test.assign(idx.begin(), idx.begin() + n_test);
  h.train.assign(idx.begin() + n_test, idx.end());
  std::sort(h.test.begin(), h.test.end());
  std::sort(h.train.begin(), h.train.end());
  return h;
}

Dataset split_holdout(const ImageBatch& all, double holdout_fraction, std::uint64_t seed) {
  const HoldoutIndices h = holdout_indices(all.size(), holdout_fraction, seed);
  Dataset ds;
  ds.train = all.subset(h.train);
  ds.test = all.subset(h.test);
  return ds;
}

}  // namespace ddae
