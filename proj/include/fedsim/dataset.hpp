#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

// A labeled pool of samples. Vector datasets hold {dim} tensors, image
// datasets {C,H,W} tensors with values in [0,1].
struct LabeledDataset {
    std::vector<Tensor> samples;
    std::vector<int> labels;
    int num_classes = 0;
    std::string split_tag;  // "train" | "test"

    std::size_t size() const { return samples.size(); }
    void validate() const;  // throws ConfigError on broken invariants
    std::vector<std::vector<std::size_t>> indices_by_class() const;
};

struct DatasetPair {
    LabeledDataset train;
    LabeledDataset test;
};

// Gaussian class blobs clamped to the unit cube; the stock vector dataset.
struct SyntheticSpec {
    int classes = 20;
    int dim = 16;
    int train_per_class = 100;
    int test_per_class = 20;
    double spread = 0.07;  // within-class standard deviation per coordinate
    std::uint64_t seed = 1;
};

DatasetPair make_synthetic(const SyntheticSpec& spec);

// Standard CIFAR-100 binary layout (train.bin / test.bin under `dir`).
DatasetPair load_cifar100(const std::string& dir);

// Dataset locator strings accepted by every CLI entry point:
//   "synthetic"                              defaults below
//   "synthetic:classes=20,dim=16,train=100,test=20,spread=0.07,seed=1"
//   "cifar100:<dir>"
//   "fractals:<file.bin>"                    (all images land in .train)
DatasetPair load_dataset(const std::string& spec);

}  // namespace fedsim
