#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "madlab/tensor.hpp"

namespace madlab {

/// Labelled samples with inputs in [0, 1]. `inputs` is [N, ...sample shape].
struct Dataset {
    Tensor inputs;
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::string name;

    std::size_t size() const noexcept { return labels.size(); }
    Shape sample_shape() const;
    std::size_t sample_size() const;

    /// Rows selected in order.
    Dataset subset(std::span<const std::size_t> rows) const;
    /// Rows [begin, min(end, N)).
    Dataset slice(std::size_t begin, std::size_t end) const;
    /// Indices of each class.
    std::vector<std::vector<std::size_t>> class_members() const;

    /// Throws DataError when an invariant is violated.
    void validate() const;
};

/// MNIST-style IDX pair: images (magic 0x00000803) and labels (magic 0x00000801).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

struct CsvSchema {
    /// Min-max scale every feature column; constant columns map to 0.
    bool normalize = false;
    /// Number of classes; inferred as max label + 1 when unset.
    std::optional<std::size_t> num_classes;
};

/// Header row, then numeric feature columns and an integer label in the last column.
Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});

enum class ToyKind { Blobs, Moons };

/// Seeded two-class 2-D data scaled into [0, 1]^2.
Dataset make_toy_dataset(ToyKind kind, std::size_t n, double noise, std::uint64_t seed);

}  // namespace madlab
