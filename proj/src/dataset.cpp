#include "elit/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <sstream>

#include "elit/binary_io.hpp"
#include "elit/image_io.hpp"

namespace elit {

namespace {

constexpr int kShapes = 4; // disc, square, triangle, ring

// RGB colors in [-1, 1]; gray images use the luminance levels below.
constexpr std::array<std::array<float, 3>, 8> kPalette = {{
    {1.0f, -0.8f, -0.8f},
    {-0.8f, 1.0f, -0.8f},
    {-0.6f, -0.4f, 1.0f},
    {1.0f, 1.0f, -0.8f},
    {1.0f, -0.6f, 1.0f},
    {-0.8f, 1.0f, 1.0f},
    {1.0f, 1.0f, 1.0f},
    {1.0f, 0.2f, -0.8f},
}};
constexpr std::array<float, 3> kGray = {1.0f, 0.35f, -0.3f};

int colors_for(int channels) { return channels == 3 ? static_cast<int>(kPalette.size()) : static_cast<int>(kGray.size()); }

bool inside(int shape, double dx, double dy, double r) {
    switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2: {
        // upward triangle with apex at -r and base at +0.8r
        if (dy < -r || dy > 0.8 * r) return false;
        const double half = (dy + r) / 1.8 * 0.95;
        return std::abs(dx) <= half;
    }
    default: {
        const double d2 = dx * dx + dy * dy;
        return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    }
}

void check(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError("dataset." + field + ": " + why);
}

} // namespace

std::string to_string(DatasetKind kind) { return kind == DatasetKind::shapes ? "shapes" : "external_image_dir"; }

DatasetKind parse_dataset_kind(const std::string& s) {
    if (s == "shapes") return DatasetKind::shapes;
    if (s == "external_image_dir") return DatasetKind::external_image_dir;
    throw ConfigError("dataset.kind: unknown kind '" + s + "' (expected shapes or external_image_dir)");
}

int shapes_class_capacity(int channels) { return kShapes * colors_for(channels); }

void ToyDatasetSpec::validate() const {
    check(num_classes > 0, "num_classes", "must be positive");
    check(samples_per_class > 0, "samples_per_class", "must be positive");
    if (kind == DatasetKind::shapes) {
        check(image_size >= 8, "image_size", "must be >= 8");
        check(channels == 1 || channels == 3, "channels", "shapes are drawn in 1 or 3 channels");
        check(num_classes <= shapes_class_capacity(channels), "num_classes",
              "exceeds the shape x color grid (" + std::to_string(shapes_class_capacity(channels)) + ")");
    } else {
        check(image_size > 0, "image_size", "must be positive");
        check(channels == 1 || channels == 3, "channels", "must be 1 or 3");
        check(!image_dir.empty(), "image_dir", "required for external_image_dir");
    }
}

Dataset gen_shapes_dataset(const ToyDatasetSpec& spec) {
    spec.validate();
    if (spec.kind != DatasetKind::shapes) throw ConfigError("dataset.kind: gen_shapes_dataset needs kind shapes");
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int s = spec.image_size;
    Dataset out;
    out.num_classes = spec.num_classes;
    const int total = spec.num_classes * spec.samples_per_class;
    out.images.reserve(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) {
        const int label = i % spec.num_classes;
        const int shape = label % kShapes;
        const int color = label / kShapes;
        const double r = s * (0.22 + 0.16 * unit(rng));
        const double margin = 0.85 * r;
        const double cx = margin + (s - 2 * margin) * unit(rng);
        const double cy = margin + (s - 2 * margin) * unit(rng);
        Image img(spec.channels, s, s, -1.0f);
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                // 3x3 supersampling for soft edges
                int hits = 0;
                for (int sy = 0; sy < 3; ++sy)
                    for (int sx = 0; sx < 3; ++sx)
                        hits += inside(shape, x + (sx + 0.5) / 3.0 - cx, y + (sy + 0.5) / 3.0 - cy, r) ? 1 : 0;
                if (hits == 0) continue;
                const float cover = static_cast<float>(hits) / 9.0f;
                for (int c = 0; c < spec.channels; ++c) {
                    const float fg = spec.channels == 3 ? kPalette[static_cast<size_t>(color)][static_cast<size_t>(c)]
                                                        : kGray[static_cast<size_t>(color)];
                    img.at(c, y, x) = -1.0f + cover * (fg + 1.0f);
                }
            }
        }
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
    return out;
}

Dataset load_image_dir(const ToyDatasetSpec& spec) {
    spec.validate();
    namespace fs = std::filesystem;
    if (!fs::is_directory(spec.image_dir)) throw IoError("dataset.image_dir: not a directory: " + spec.image_dir);
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(spec.image_dir))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (static_cast<int>(class_dirs.size()) < spec.num_classes)
        throw ConfigError("dataset.num_classes: image_dir has only " + std::to_string(class_dirs.size()) +
                          " class directories");
    Dataset out;
    out.num_classes = spec.num_classes;
    std::vector<std::vector<Image>> per_class(static_cast<size_t>(spec.num_classes));
    for (int c = 0; c < spec.num_classes; ++c) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[static_cast<size_t>(c)]))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (static_cast<int>(files.size()) > spec.samples_per_class) files.resize(static_cast<size_t>(spec.samples_per_class));
        if (files.empty()) throw IoError("dataset.image_dir: no PNG files in " + class_dirs[static_cast<size_t>(c)].string());
        for (const auto& f : files) {
            Image img = read_png(f);
            if (img.channels != spec.channels || img.height != spec.image_size || img.width != spec.image_size)
                throw ShapeError("dataset.image_dir: " + f.string() + " does not match image_size/channels");
            per_class[static_cast<size_t>(c)].push_back(std::move(img));
        }
    }
    // interleave classes like the generator does
    for (size_t k = 0;; ++k) {
        bool any = false;
        for (int c = 0; c < spec.num_classes; ++c) {
            auto& imgs = per_class[static_cast<size_t>(c)];
            if (k < imgs.size()) {
                out.images.push_back(imgs[k]);
                out.labels.push_back(c);
                any = true;
            }
        }
        if (!any) break;
    }
    return out;
}

Dataset make_dataset(const ToyDatasetSpec& spec) {
    return spec.kind == DatasetKind::shapes ? gen_shapes_dataset(spec) : load_image_dir(spec);
}

std::uint32_t spec_hash(const ToyDatasetSpec& spec) {
    std::ostringstream os;
    os << "kind=" << to_string(spec.kind) << ";image_size=" << spec.image_size << ";channels=" << spec.channels
       << ";num_classes=" << spec.num_classes << ";samples_per_class=" << spec.samples_per_class
       << ";seed=" << spec.seed << ";image_dir=" << spec.image_dir << ";generator=1";
    const std::string s = os.str();
    return crc32_of(s.data(), s.size());
}

namespace {
constexpr char kDatasetMagic[8] = {'E', 'L', 'I', 'T', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kDatasetVersion = 1;
} // namespace

void write_dataset_archive(const std::filesystem::path& path, const ToyDatasetSpec& spec, const Dataset& data) {
    ByteWriter w;
    w.put_bytes(kDatasetMagic, sizeof kDatasetMagic);
    w.put<std::uint32_t>(kDatasetVersion);
    w.put<std::uint32_t>(spec_hash(spec));
    w.put<std::uint64_t>(data.size());
    const Image& first = data.images.at(0);
    w.put<std::int32_t>(first.channels);
    w.put<std::int32_t>(first.height);
    w.put<std::int32_t>(first.width);
    w.put<std::int32_t>(data.num_classes);
    for (int y : data.labels) w.put<std::int32_t>(y);
    for (const Image& img : data.images) {
        if (!img.same_shape(first)) throw ShapeError("write_dataset_archive: mixed image shapes");
        w.put_bytes(img.data.data(), img.data.size() * sizeof(float));
    }
    w.seal();
    write_file(path.string(), w.bytes());
}

Dataset read_dataset_archive(const std::filesystem::path& path, const ToyDatasetSpec& spec) {
    ByteReader r(read_file(path.string()), path.string());
    char magic[8];
    r.get_bytes(magic, sizeof magic);
    if (!std::equal(magic, magic + 8, kDatasetMagic)) throw IntegrityError(path.string() + ": not a dataset archive");
    const auto version = r.get<std::uint32_t>();
    if (version != kDatasetVersion)
        throw IntegrityError(path.string() + ": dataset archive version " + std::to_string(version) + " unsupported");
    if (r.get<std::uint32_t>() != spec_hash(spec)) throw IntegrityError(path.string() + ": spec hash mismatch");
    const auto count = r.get<std::uint64_t>();
    const int c = r.get<std::int32_t>(), h = r.get<std::int32_t>(), wd = r.get<std::int32_t>();
    Dataset out;
    out.num_classes = r.get<std::int32_t>();
    out.labels.resize(count);
    for (auto& y : out.labels) y = r.get<std::int32_t>();
    out.images.assign(count, Image(c, h, wd));
    for (auto& img : out.images) r.get_bytes(img.data.data(), img.data.size() * sizeof(float));
    if (!r.done()) throw IntegrityError(path.string() + ": trailing bytes");
    return out;
}

Dataset cached_dataset(const ToyDatasetSpec& spec, const std::filesystem::path& cache_dir) {
    char name[32];
    std::snprintf(name, sizeof name, "dataset-%08x.bin", spec_hash(spec));
    const auto path = cache_dir / name;
    if (std::filesystem::exists(path)) {
        try {
            return read_dataset_archive(path, spec);
        } catch (const IntegrityError&) {
            // stale or damaged cache entry: regenerate below
        }
    }
    Dataset data = make_dataset(spec);
    std::filesystem::create_directories(cache_dir);
    write_dataset_archive(path, spec, data);
    return data;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& data, size_t count) {
    if (count >= data.size()) throw ConfigError("dataset: validation split leaves no training samples");
    Dataset train, val;
    train.num_classes = val.num_classes = data.num_classes;
    const size_t cut = data.size() - count;
    train.images.assign(data.images.begin(), data.images.begin() + static_cast<std::ptrdiff_t>(cut));
    train.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(cut));
    val.images.assign(data.images.begin() + static_cast<std::ptrdiff_t>(cut), data.images.end());
    val.labels.assign(data.labels.begin() + static_cast<std::ptrdiff_t>(cut), data.labels.end());
    return {std::move(train), std::move(val)};
}

void PaddedVariantSpec::validate() const {
    if (pad_factor < 1) throw ConfigError("padding.pad_factor: must be >= 1");
    if (side_factor() * side_factor() != pad_factor)
        throw ConfigError("padding.pad_factor: must be a perfect square, got " + std::to_string(pad_factor));
}

int PaddedVariantSpec::side_factor() const {
    int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(std::max(pad_factor, 0)))));
    return s;
}

int PaddedDataset::real_tokens() const {
    return static_cast<int>(std::count(token_mask.begin(), token_mask.end(), true));
}

Image pad_image(const Image& image, int side_factor, float fill) {
    if (side_factor < 1) throw std::invalid_argument("pad_image: side factor must be >= 1");
    Image out(image.channels, image.height * side_factor, image.width * side_factor, fill);
    for (int c = 0; c < image.channels; ++c)
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, x);
    return out;
}

Image crop_image(const Image& padded, int height, int width) {
    if (height > padded.height || width > padded.width) throw ShapeError("crop_image: crop larger than the image");
    Image out(padded.channels, height, width);
    for (int c = 0; c < padded.channels; ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) out.at(c, y, x) = padded.at(c, y, x);
    return out;
}

PaddedDataset make_padded_variant(const Dataset& data, const PaddedVariantSpec& spec, int patch_size) {
    spec.validate();
    if (data.size() == 0) throw ShapeError("make_padded_variant: empty dataset");
    const int size = data.images[0].height;
    if (data.images[0].width != size) throw ShapeError("make_padded_variant: square images required");
    if (patch_size < 1 || size % patch_size != 0)
        throw ConfigError("backbone.patch_size: must divide the image size " + std::to_string(size));
    const int k = spec.side_factor();
    PaddedDataset out;
    out.real_size = size;
    out.padded_size = size * k;
    out.patch_size = patch_size;
    out.data.num_classes = data.num_classes;
    out.data.labels = data.labels;
    for (const Image& img : data.images) out.data.images.push_back(pad_image(img, k, spec.fill_value));
    const int real_side = size / patch_size;
    const int side = real_side * k;
    out.token_mask.assign(static_cast<size_t>(side) * side, false);
    for (int r = 0; r < real_side; ++r)
        for (int c = 0; c < real_side; ++c) out.token_mask[static_cast<size_t>(r) * side + c] = true;
    return out;
}

template <typename T>
Mat<T> token_mask_matrix(const std::vector<bool>& mask, Index samples, int patch_dim) {
    const Index n = static_cast<Index>(mask.size());
    Mat<T> m(samples * n, patch_dim);
    for (Index b = 0; b < samples; ++b)
        for (Index i = 0; i < n; ++i) m.row(b * n + i).setConstant(mask[static_cast<size_t>(i)] ? T(1) : T(0));
    return m;
}

template Mat<float> token_mask_matrix<float>(const std::vector<bool>&, Index, int);
template Mat<double> token_mask_matrix<double>(const std::vector<bool>&, Index, int);

} // namespace elit
