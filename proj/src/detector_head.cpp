#include "docklab/detector_head.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "docklab/errors.hpp"
#include "docklab/rng.hpp"

namespace docklab {

HeadParameters init_head_parameters(std::size_t feature_dim, std::size_t classes,
                                    std::uint64_t seed) {
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    HeadParameters p;
    p.w_r = Matrix(feature_dim, classes);
    p.w_d = Matrix(feature_dim, classes);
    p.b_r.assign(classes, 0.0);
    p.b_d.assign(classes, 0.0);
    for (double& v : p.w_r.data()) v = rng.uniform(-scale, scale);
    for (double& v : p.w_d.data()) v = rng.uniform(-scale, scale);
    return p;
}

namespace {

Matrix affine_logits(const Matrix& features, const Matrix& w,
                     const std::vector<double>& b) {
    const std::size_t p = features.rows();
    const std::size_t d = features.cols();
    const std::size_t c = w.cols();
    Matrix out(p, c);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double z = b[j];
            for (std::size_t k = 0; k < d; ++k) z += features(i, k) * w(k, j);
            out(i, j) = z;
        }
    }
    return out;
}

Matrix row_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double mx = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            out(i, j) = std::exp(logits(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < logits.cols(); ++j) out(i, j) /= sum;
    }
    return out;
}

Matrix col_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        double mx = logits(0, j);
        for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            out(i, j) = std::exp(logits(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t i = 0; i < logits.rows(); ++i) out(i, j) /= sum;
    }
    return out;
}

}  // namespace

ForwardTrace forward(const Matrix& features, const HeadParameters& params,
                     const Matrix& prior) {
    if (features.rows() == 0) {
        throw DataError("forward: image has no proposals");
    }
    if (features.cols() != params.feature_dim()) {
        throw DataError("forward: feature dimension " + std::to_string(features.cols()) +
                        " != parameter dimension " + std::to_string(params.feature_dim()));
    }
    if (prior.rows() != features.rows() || prior.cols() != params.class_count()) {
        throw DataError("forward: prior shape mismatch");
    }
    for (double v : features.data()) {
        if (!std::isfinite(v)) throw NumericError("forward: non-finite feature");
    }

    ForwardTrace t;
    t.features = features;
    t.logits_r = affine_logits(features, params.w_r, params.b_r);
    t.logits_d = affine_logits(features, params.w_d, params.b_d);
    t.x_r = row_softmax(t.logits_r);
    t.x_d = col_softmax(t.logits_d);

    const std::size_t p = features.rows();
    const std::size_t c = params.class_count();
    t.x = Matrix(p, c);
    t.z = Matrix(p, c);
    t.probs.assign(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            t.x(i, j) = t.x_r(i, j) * t.x_d(i, j);
            t.z(i, j) = prior(i, j) * t.x(i, j);
            sum += t.z(i, j);
        }
        // The exact sum is <= 1; clamp away float round-up.
        t.probs[j] = std::clamp(sum, 0.0, 1.0);
    }
    return t;
}

double bce_loss(const std::vector<double>& probs, const std::vector<double>& labels,
                double epsilon) {
    if (probs.size() != labels.size()) {
        throw std::invalid_argument("bce_loss: size mismatch");
    }
    if (!(epsilon > 0.0 && epsilon < 0.5)) {
        throw std::invalid_argument("bce_loss: epsilon must be in (0, 0.5)");
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
        const double y = labels[j];
        if (y != 0.0 && y != 1.0) {
            throw std::invalid_argument("bce_loss: labels must be 0 or 1");
        }
        const double p = std::clamp(probs[j], epsilon, 1.0 - epsilon);
        loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    return loss;
}

HeadGradients backward(const ForwardTrace& trace, const std::vector<double>& labels,
                       const Matrix& prior, double epsilon) {
    const std::size_t p = trace.x.rows();
    const std::size_t c = trace.x.cols();
    const std::size_t d = trace.features.cols();
    if (labels.size() != c) throw std::invalid_argument("backward: label size mismatch");

    // dL/dprob, zero where the clamp is active.
    std::vector<double> dprob(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) {
        const double pj = trace.probs[j];
        if (pj < epsilon || pj > 1.0 - epsilon) continue;
        dprob[j] = -labels[j] / pj + (1.0 - labels[j]) / (1.0 - pj);
    }

    // probs(c) = sum_n prior(n,c) * x_r(n,c) * x_d(n,c)
    Matrix dxr(p, c), dxd(p, c);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double dx = prior(i, j) * dprob[j];
            dxr(i, j) = dx * trace.x_d(i, j);
            dxd(i, j) = dx * trace.x_r(i, j);
        }
    }

    // Softmax Jacobians: rows of x_r, columns of x_d.
    Matrix dlr(p, c), dld(p, c);
    for (std::size_t i = 0; i < p; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += dxr(i, j) * trace.x_r(i, j);
        for (std::size_t j = 0; j < c; ++j) {
            dlr(i, j) = trace.x_r(i, j) * (dxr(i, j) - dot);
        }
    }
    for (std::size_t j = 0; j < c; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < p; ++i) dot += dxd(i, j) * trace.x_d(i, j);
        for (std::size_t i = 0; i < p; ++i) {
            dld(i, j) = trace.x_d(i, j) * (dxd(i, j) - dot);
        }
    }

    HeadGradients g;
    g.w_r = Matrix(d, c);
    g.w_d = Matrix(d, c);
    g.b_r.assign(c, 0.0);
    g.b_d.assign(c, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            const double f = trace.features(i, k);
            for (std::size_t j = 0; j < c; ++j) {
                g.w_r(k, j) += f * dlr(i, j);
                g.w_d(k, j) += f * dld(i, j);
            }
        }
        for (std::size_t j = 0; j < c; ++j) {
            g.b_r[j] += dlr(i, j);
            g.b_d[j] += dld(i, j);
        }
    }
    return g;
}

void sgd_step(HeadParameters& params, const HeadGradients& grads, double lr) {
    if (!(lr >= 0.0)) throw std::invalid_argument("sgd_step: lr must be >= 0");
    for (std::size_t i = 0; i < params.w_r.data().size(); ++i) {
        params.w_r.data()[i] -= lr * grads.w_r.data()[i];
        params.w_d.data()[i] -= lr * grads.w_d.data()[i];
    }
    for (std::size_t j = 0; j < params.b_r.size(); ++j) {
        params.b_r[j] -= lr * grads.b_r[j];
        params.b_d[j] -= lr * grads.b_d[j];
    }
}

Matrix concat_prior_features(const Matrix& features, const SourceModelBank& bank) {
    const std::size_t p = features.rows();
    const std::size_t d = features.cols();
    const std::size_t extra = bank.source_order.size() + bank.attribute_order.size();
    Matrix out(p, d + extra);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < d; ++k) out(i, k) = features(i, k);
    }
    std::size_t col = d;
    for (const auto& cls : bank.source_order) {
        const auto scores = score_proposals(bank.detectors.at(cls), features);
        for (std::size_t i = 0; i < p; ++i) out(i, col) = scores[i];
        ++col;
    }
    for (const auto& attr : bank.attribute_order) {
        const auto scores = score_proposals(bank.attributes.at(attr), features);
        for (std::size_t i = 0; i < p; ++i) out(i, col) = scores[i];
        ++col;
    }
    return out;
}

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'L', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_raw(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const auto d = static_cast<std::uint32_t>(ckpt.params.feature_dim());
    const auto c = static_cast<std::uint32_t>(ckpt.params.class_count());
    write_raw(out, d);
    write_raw(out, c);
    write_raw(out, ckpt.seed);
    write_raw(out, ckpt.epoch);
    write_doubles(out, ckpt.params.w_r.data());
    write_doubles(out, ckpt.params.b_r);
    write_doubles(out, ckpt.params.w_d.data());
    write_doubles(out, ckpt.params.b_d);
    if (!out) throw DataError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw DataError(path + ": not a checkpoint file");
    }
    std::uint32_t d = 0, c = 0;
    Checkpoint ckpt;
    read_raw(in, d);
    read_raw(in, c);
    read_raw(in, ckpt.seed);
    read_raw(in, ckpt.epoch);
    ckpt.params.w_r = Matrix(d, c);
    ckpt.params.w_d = Matrix(d, c);
    ckpt.params.b_r.assign(c, 0.0);
    ckpt.params.b_d.assign(c, 0.0);
    read_doubles(in, ckpt.params.w_r.data());
    read_doubles(in, ckpt.params.b_r);
    read_doubles(in, ckpt.params.w_d.data());
    read_doubles(in, ckpt.params.b_d);
    if (!in) throw DataError(path + ": truncated checkpoint");
    return ckpt;
}

}  // namespace docklab
