#include "madlab/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "madlab/errors.hpp"
#include "madlab/rng.hpp"

namespace madlab {

Shape Dataset::sample_shape() const {
    const Shape& s = inputs.shape();
    return s.size() > 1 ? Shape(s.begin() + 1, s.end()) : Shape{};
}

std::size_t Dataset::sample_size() const { return shape_numel(sample_shape()); }

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset d;
    d.inputs = inputs.gather_rows(rows);
    d.labels.reserve(rows.size());
    for (std::size_t r : rows) d.labels.push_back(labels.at(r));
    d.num_classes = num_classes;
    d.name = name;
    return d;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    end = std::min(end, size());
    begin = std::min(begin, end);
    Dataset d;
    d.inputs = inputs.slice_rows(begin, end);
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
    d.num_classes = num_classes;
    d.name = name;
    return d;
}

std::vector<std::vector<std::size_t>> Dataset::class_members() const {
    std::vector<std::vector<std::size_t>> m(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) m.at(labels[i]).push_back(i);
    return m;
}

void Dataset::validate() const {
    if (inputs.rank() < 2 || inputs.dim(0) != labels.size()) {
        throw DataError(DataError::Kind::CountMismatch, "dataset: " + std::to_string(labels.size()) +
                                                            " labels for inputs " + shape_str(inputs.shape()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw DataError(DataError::Kind::Range, "dataset: sample " + std::to_string(i) + " has label " +
                                                        std::to_string(labels[i]) + " outside [0, " +
                                                        std::to_string(num_classes) + ")");
        }
    }
    for (double v : inputs.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError(DataError::Kind::Range, "dataset: input value outside [0, 1]");
    }
    if (size() < num_classes) {
        throw DataError(DataError::Kind::Empty, "dataset: " + std::to_string(size()) + " samples for " +
                                                    std::to_string(num_classes) + " classes");
    }
}

// ---------------------------------------------------------------------------

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError(DataError::Kind::Io, "cannot open " + p.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::string& b, std::size_t off, const std::filesystem::path& p) {
    if (off + 4 > b.size()) throw DataError(DataError::Kind::Truncated, "idx: " + p.string() + " truncated header");
    return (std::uint32_t(static_cast<unsigned char>(b[off])) << 24) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 1])) << 16) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 2])) << 8) |
           std::uint32_t(static_cast<unsigned char>(b[off + 3]));
}

void put_be32(std::string& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<char>((v >> s) & 0xFF));
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const std::string ib = read_file(images);
    const std::string lb = read_file(labels);
    const std::uint32_t im = be32(ib, 0, images);
    if (im != 0x00000803) {
        std::ostringstream os;
        os << "idx: bad image magic 0x" << std::hex << im << " in " << images.string();
        throw DataError(DataError::Kind::BadMagic, os.str());
    }
    const std::uint32_t lm = be32(lb, 0, labels);
    if (lm != 0x00000801) {
        std::ostringstream os;
        os << "idx: bad label magic 0x" << std::hex << lm << " in " << labels.string();
        throw DataError(DataError::Kind::BadMagic, os.str());
    }
    const std::size_t n = be32(ib, 4, images), rows = be32(ib, 8, images), cols = be32(ib, 12, images);
    const std::size_t nl = be32(lb, 4, labels);
    if (n != nl) {
        throw DataError(DataError::Kind::CountMismatch,
                        "idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
    }
    if (ib.size() < 16 + n * rows * cols) {
        throw DataError(DataError::Kind::Truncated, "idx: " + images.string() + " holds fewer than " +
                                                        std::to_string(n) + " images");
    }
    if (lb.size() < 8 + n) {
        throw DataError(DataError::Kind::Truncated, "idx: " + labels.string() + " holds fewer than " +
                                                        std::to_string(n) + " labels");
    }
    std::vector<double> px(n * rows * cols);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(ib[16 + i]) / 255.0;
    Dataset d;
    d.inputs = Tensor(Shape{n, rows, cols}, std::move(px));
    d.labels.resize(n);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        d.labels[i] = static_cast<unsigned char>(lb[8 + i]);
        max_label = std::max(max_label, d.labels[i]);
    }
    d.num_classes = n ? std::max<std::size_t>(max_label + 1, 2) : 0;
    d.name = images.filename().string();
    return d;
}

void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
    const Shape s = data.sample_shape();
    if (s.size() != 2) throw DataError(DataError::Kind::Range, "idx: samples must be 2-D images");
    std::string ib, lb;
    put_be32(ib, 0x00000803);
    put_be32(ib, static_cast<std::uint32_t>(data.size()));
    put_be32(ib, static_cast<std::uint32_t>(s[0]));
    put_be32(ib, static_cast<std::uint32_t>(s[1]));
    for (double v : data.inputs.data()) ib.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    put_be32(lb, 0x00000801);
    put_be32(lb, static_cast<std::uint32_t>(data.size()));
    for (std::size_t y : data.labels) lb.push_back(static_cast<char>(y));
    std::ofstream(images, std::ios::binary).write(ib.data(), static_cast<std::streamsize>(ib.size()));
    std::ofstream(labels, std::ios::binary).write(lb.data(), static_cast<std::streamsize>(lb.size()));
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end && std::isfinite(out);
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError(DataError::Kind::Io, "csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos) {
        throw DataError(DataError::Kind::Empty, "csv: " + path.string() + " is empty");
    }
    const std::size_t ncols = split_csv_line(line).size();
    if (ncols < 2) throw DataError(DataError::Kind::Parse, "csv: header needs at least one feature and a label");
    const std::size_t nf = ncols - 1;

    std::vector<double> feats;
    std::vector<long long> raw_labels;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != ncols) {
            throw DataError(DataError::Kind::Parse, "csv: row " + std::to_string(row) + " has " +
                                                        std::to_string(cells.size()) + " cells, expected " +
                                                        std::to_string(ncols));
        }
        for (std::size_t j = 0; j < nf; ++j) {
            double v;
            if (!parse_double(cells[j], v)) {
                throw DataError(DataError::Kind::Parse, "csv: row " + std::to_string(row) + " column " +
                                                            std::to_string(j + 1) + ": non-numeric cell '" +
                                                            cells[j] + "'");
            }
            feats.push_back(v);
        }
        long long y = 0;
        const std::string& lc = cells.back();
        auto [p, ec] = std::from_chars(lc.data(), lc.data() + lc.size(), y);
        if (ec != std::errc() || p != lc.data() + lc.size()) {
            throw DataError(DataError::Kind::Parse, "csv: row " + std::to_string(row) + ": label '" + lc +
                                                        "' is not an integer");
        }
        raw_labels.push_back(y);
    }
    const std::size_t n = raw_labels.size();
    if (n == 0) throw DataError(DataError::Kind::Empty, "csv: " + path.string() + " has no data rows");

    long long max_label = 0;
    for (long long y : raw_labels) max_label = std::max(max_label, y);
    const std::size_t classes = schema.num_classes.value_or(static_cast<std::size_t>(max_label) + 1);
    Dataset d;
    d.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (raw_labels[i] < 0 || static_cast<std::size_t>(raw_labels[i]) >= classes) {
            throw DataError(DataError::Kind::Range, "csv: row " + std::to_string(i + 2) + ": label " +
                                                        std::to_string(raw_labels[i]) + " outside [0, " +
                                                        std::to_string(classes) + ")");
        }
        d.labels.push_back(static_cast<std::size_t>(raw_labels[i]));
    }
    if (schema.normalize) {
        for (std::size_t j = 0; j < nf; ++j) {
            double lo = feats[j], hi = feats[j];
            for (std::size_t i = 0; i < n; ++i) {
                lo = std::min(lo, feats[i * nf + j]);
                hi = std::max(hi, feats[i * nf + j]);
            }
            for (std::size_t i = 0; i < n; ++i) {
                double& v = feats[i * nf + j];
                v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
            }
        }
    } else {
        for (std::size_t i = 0; i < feats.size(); ++i) {
            if (feats[i] < 0.0 || feats[i] > 1.0) {
                throw DataError(DataError::Kind::Range, "csv: row " + std::to_string(i / nf + 2) + " column " +
                                                            std::to_string(i % nf + 1) +
                                                            ": value outside [0, 1] (enable normalization)");
            }
        }
    }
    d.inputs = Tensor(Shape{n, nf}, std::move(feats));
    d.num_classes = std::max<std::size_t>(classes, 1);
    d.name = path.filename().string();
    return d;
}

// ---------------------------------------------------------------------------

Dataset make_toy_dataset(ToyKind kind, std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) throw InvalidArgument("make_toy_dataset: n must be at least 2");
    if (!(noise >= 0.0)) throw InvalidArgument("make_toy_dataset: noise must be >= 0");
    Rng rng(derive_seed(seed, 0x70A));
    std::vector<double> pts(2 * n);
    std::vector<std::size_t> labels(n);
    const std::size_t n0 = n / 2 + n % 2;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t cls = i < n0 ? 0 : 1;
        double x, y;
        if (kind == ToyKind::Blobs) {
            const double c = cls == 0 ? 0.3 : 0.7;
            x = c + noise * rng.normal();
            y = c + noise * rng.normal();
        } else {
            // two interleaved half circles, mapped from [-1, 2] x [-0.5, 1] into the unit square
            const std::size_t k = cls == 0 ? i : i - n0;
            const std::size_t m = cls == 0 ? n0 : n - n0;
            const double t = m > 1 ? 3.14159265358979323846 * static_cast<double>(k) / static_cast<double>(m - 1) : 0.0;
            double mx = cls == 0 ? std::cos(t) : 1.0 - std::cos(t);
            double my = cls == 0 ? std::sin(t) : 0.5 - std::sin(t);
            mx += noise * rng.normal();
            my += noise * rng.normal();
            x = (mx + 1.5) / 4.0;
            y = (my + 1.0) / 2.5;
        }
        pts[2 * i] = std::clamp(x, 0.0, 1.0);
        pts[2 * i + 1] = std::clamp(y, 0.0, 1.0);
        labels[i] = cls;
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    Dataset d;
    d.inputs = Tensor(Shape{n, 2}, std::move(pts)).gather_rows(order);
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = labels[order[i]];
    d.num_classes = 2;
    d.name = kind == ToyKind::Blobs ? "blobs" : "moons";
    return d;
}

}  // namespace madlab
