#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docklab/matrix.hpp"
#include "docklab/source_models.hpp"

namespace docklab {

// Two linear scoring maps. The recognition stream is softmaxed over
// classes per proposal, the detection stream over proposals per class.
struct HeadParameters {
    Matrix w_r;                // feature_dim x classes
    std::vector<double> b_r;   // classes
    Matrix w_d;
    std::vector<double> b_d;

    std::size_t feature_dim() const { return w_r.rows(); }
    std::size_t class_count() const { return w_r.cols(); }

    friend bool operator==(const HeadParameters& a, const HeadParameters& b) {
        return a.w_r == b.w_r && a.b_r == b.b_r && a.w_d == b.w_d && a.b_d == b.b_d;
    }
};

// Centered uniform init scaled by 1/sqrt(feature_dim), zero biases.
HeadParameters init_head_parameters(std::size_t feature_dim, std::size_t classes,
                                    std::uint64_t seed);

struct ForwardTrace {
    Matrix logits_r, logits_d;
    Matrix x_r, x_d;           // row / column softmaxes
    Matrix x;                  // x_r .* x_d
    Matrix z;                  // prior .* x
    std::vector<double> probs; // per-class image probability
    Matrix features;           // cached input for backward
};

struct HeadGradients {
    Matrix w_r;
    std::vector<double> b_r;
    Matrix w_d;
    std::vector<double> b_d;
};

// prior is the per-image Y matrix; pass all-ones to run the bare network.
ForwardTrace forward(const Matrix& features, const HeadParameters& params,
                     const Matrix& prior);

double bce_loss(const std::vector<double>& probs, const std::vector<double>& labels,
                double epsilon);

HeadGradients backward(const ForwardTrace& trace, const std::vector<double>& labels,
                       const Matrix& prior, double epsilon);

void sgd_step(HeadParameters& params, const HeadGradients& grads, double lr);

// Appends per-proposal source-detector probabilities and then attribute
// probabilities to each feature row.
Matrix concat_prior_features(const Matrix& features, const SourceModelBank& bank);

// Binary checkpoint: header (feature_dim, classes, seed, epoch) followed by
// raw little-endian doubles; round-trips bit-exactly.
struct Checkpoint {
    HeadParameters params;
    std::uint64_t seed = 0;
    std::uint32_t epoch = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace docklab
