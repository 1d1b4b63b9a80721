#include "dice/models.hpp"

#include "dice/error.hpp"
#include "dice/random.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dice {

namespace {

using ad::Var;

std::string member_prefix(std::size_t i) { return "m" + std::to_string(i) + "/"; }

void add_dense(ParamSet& ps, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    ps.add(prefix + "W", rng.uniform_tensor(in, out, -bound, bound));
    ps.add(prefix + "b", rng.uniform_tensor(1, out, -bound, bound));
}

Tensor row_tensor(std::span<const double> x) { return Tensor::row(x); }

} // namespace

EnsembleModel::EnsembleModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    const auto& c = config_;
    if (c.members < 1)
        throw std::invalid_argument("an ensemble needs at least one member");
    if (c.input_dim == 0 || c.feature_dim == 0 || c.num_classes == 0 || c.hidden == 0 || c.hidden_layers == 0)
        throw std::invalid_argument("model dimensions must be positive");

    Rng rng = Rng::stream(seed, Stream::MemberInit);
    auto layer_in = [&](std::size_t layer) { return layer == 0 ? c.input_dim : c.hidden; };
    if (c.structure == Structure::SharedTrunk)
        add_dense(member_params_, rng, "trunk/l0/", c.input_dim, c.hidden);
    for (std::size_t i = 0; i < c.members; ++i) {
        const std::string p = member_prefix(i);
        std::size_t first = c.structure == Structure::SharedTrunk ? 1 : 0;
        for (std::size_t l = first; l < c.hidden_layers; ++l)
            add_dense(member_params_, rng, p + "l" + std::to_string(l) + "/", layer_in(l), c.hidden);
        add_dense(member_params_, rng, p + "mean/", c.hidden, c.feature_dim);
        add_dense(member_params_, rng, p + "scale/", c.feature_dim, c.feature_dim);
        // softplus(log(e - 1)) = 1: scales start at the unit class scale.
        member_params_.value(p + "scale/b").mat().setConstant(std::log(std::exp(1.0) - 1.0));
        add_dense(member_params_, rng, p + "cls/", c.feature_dim, c.num_classes);
        member_params_.add(p + "backward", rng.normal_tensor(c.num_classes, c.feature_dim));
        member_params_.add(p + "marginal", Tensor(1, c.feature_dim));
    }

    Rng drng = Rng::stream(seed, Stream::DiscriminatorInit);
    const auto& dc = c.discriminator;
    if (dc.hidden.empty())
        throw std::invalid_argument("discriminator needs at least one hidden layer");
    std::size_t emb = dc.conditional ? dc.class_embedding : 0;
    if (dc.conditional)
        disc_params_.add("emb", drng.normal_tensor(c.num_classes, dc.class_embedding));
    std::size_t in = c.members * c.feature_dim;
    for (std::size_t l = 0; l < dc.hidden.size(); ++l) {
        std::size_t extra = l < 2 ? emb : 0;
        add_dense(disc_params_, drng, "l" + std::to_string(l) + "/", in + extra, dc.hidden[l]);
        in = dc.hidden[l];
    }
    add_dense(disc_params_, drng, "out/", in, dc.conditional ? c.num_classes : 1);
}

std::vector<std::string> EnsembleModel::member_param_names(std::size_t i) const {
    std::vector<std::string> names;
    const std::string p = member_prefix(i);
    if (config_.structure == Structure::SharedTrunk) {
        names.push_back("trunk/l0/W");
        names.push_back("trunk/l0/b");
    }
    for (const auto& prm : member_params_) {
        if (prm.name.starts_with(p))
            names.push_back(prm.name);
    }
    return names;
}

Var EnsembleModel::bind(ad::Graph& g, const ParamSet& ps, const std::string& name, Grad mode) const {
    return mode == Grad::Train ? g.param(ps, name) : g.frozen(ps, name);
}

Var EnsembleModel::dense(ad::Graph& g, const ParamSet& ps, const std::string& prefix, Var x, Grad mode) const {
    return ad::add_row(ad::matmul(x, bind(g, ps, prefix + "W", mode)), bind(g, ps, prefix + "b", mode));
}

EncodedVars EnsembleModel::encode(ad::Graph& g, std::size_t member, Var x, Grad mode) const {
    if (member >= config_.members)
        throw std::out_of_range("member index out of range");
    if (x.cols() != config_.input_dim)
        throw ShapeError("encode: expected input width " + std::to_string(config_.input_dim) + ", got " +
                         std::to_string(x.cols()));
    const std::string p = member_prefix(member);
    Var h = x;
    for (std::size_t l = 0; l < config_.hidden_layers; ++l) {
        std::string prefix = (l == 0 && config_.structure == Structure::SharedTrunk)
                                 ? std::string("trunk/l0/")
                                 : p + "l" + std::to_string(l) + "/";
        h = ad::relu(dense(g, member_params_, prefix, h, mode));
    }
    Var mean = dense(g, member_params_, p + "mean/", h, mode);
    Var scale = ad::softplus(dense(g, member_params_, p + "scale/", mean, mode));
    return {mean, scale};
}

Var EnsembleModel::classify(ad::Graph& g, std::size_t member, Var z, Grad mode) const {
    if (z.cols() != config_.feature_dim)
        throw ShapeError("classify: feature width mismatch");
    return dense(g, member_params_, member_prefix(member) + "cls/", z, mode);
}

Var EnsembleModel::backward_means(ad::Graph& g, std::size_t member, std::span<const int> labels, Grad mode) const {
    return ad::gather_rows(bind(g, member_params_, member_prefix(member) + "backward", mode), labels);
}

Var EnsembleModel::marginal_means(ad::Graph& g, std::size_t member, std::size_t rows, Grad mode) const {
    std::vector<int> zeros(rows, 0);
    return ad::gather_rows(bind(g, member_params_, member_prefix(member) + "marginal", mode), zeros);
}

Var EnsembleModel::discriminate_logits(ad::Graph& g, Var input, std::span<const int> labels, Grad mode) const {
    const auto& dc = config_.discriminator;
    if (input.cols() != config_.members * config_.feature_dim)
        throw ShapeError("discriminator input width mismatch");
    if (labels.size() != input.rows())
        throw ShapeError("discriminator needs one label per row");
    Var emb;
    if (dc.conditional) {
        for (int y : labels) {
            if (y < 0 || static_cast<std::size_t>(y) >= config_.num_classes)
                throw std::out_of_range("class index out of range");
        }
        emb = ad::gather_rows(bind(g, disc_params_, "emb", mode), labels);
    }
    Var h = input;
    for (std::size_t l = 0; l < dc.hidden.size(); ++l) {
        if (dc.conditional && l < 2) {
            Var parts[] = {h, emb};
            h = ad::concat_cols(parts);
        }
        h = ad::leaky_relu(dense(g, disc_params_, "l" + std::to_string(l) + "/", h, mode), dc.leaky_slope);
    }
    Var out = dense(g, disc_params_, "out/", h, mode);
    return dc.conditional ? ad::pick(out, labels) : out;
}

GaussianFeatures EnsembleModel::encode(std::size_t member, std::span<const double> x) const {
    ad::Graph g;
    auto enc = encode(g, member, g.constant(row_tensor(x)), Grad::Frozen);
    auto m = enc.mean.value().values();
    auto s = enc.scale.value().values();
    return {{m.begin(), m.end()}, {s.begin(), s.end()}};
}

std::vector<double> EnsembleModel::classify(std::size_t member, std::span<const double> z) const {
    ad::Graph g;
    auto v = classify(g, member, g.constant(row_tensor(z)), Grad::Frozen).value().values();
    return {v.begin(), v.end()};
}

double EnsembleModel::discriminate(std::size_t slot_i, std::span<const double> z_i, std::size_t slot_j,
                                   std::span<const double> z_j, int y) const {
    ad::Graph g;
    Var in = slot_layout(g, config_.members, slot_i, g.constant(row_tensor(z_i)), slot_j, g.constant(row_tensor(z_j)));
    int labels[] = {y};
    double a = discriminate_logits(g, in, labels, Grad::Frozen).value().item();
    return a >= 0.0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
}

std::vector<double> EnsembleModel::ensemble_predict(std::span<const double> x) const {
    auto out = predict_batch(*this, row_tensor(x));
    auto v = out.ensemble_probs.values();
    return {v.begin(), v.end()};
}

Var sample_features(Var mean, Var scale, const Tensor& noise, ScaleMode mode, double ramp, bool block_scale_grad) {
    ad::Graph& g = mean.graph();
    if (!noise.same_shape(mean.value()))
        throw ShapeError("noise shape must match feature shape");
    switch (mode) {
    case ScaleMode::None:
        return mean;
    case ScaleMode::Unit:
        return ad::add(mean, g.constant(noise));
    case ScaleMode::Predicted:
    case ScaleMode::Ramped: {
        Var s = block_scale_grad ? ad::stop_gradient(scale) : scale;
        if (mode == ScaleMode::Ramped) {
            double a = std::clamp(ramp, 0.0, 1.0);
            s = ad::add_scalar(ad::scale(s, a), 1.0 - a);
        }
        return ad::add(mean, ad::mul(g.constant(noise), s));
    }
    }
    throw std::logic_error("unhandled scale mode");
}

std::vector<double> sample_features(const GaussianFeatures& gf, std::span<const double> noise, ScaleMode mode,
                                    double ramp) {
    if (noise.size() != gf.mean.size() || gf.scale.size() != gf.mean.size())
        throw ShapeError("noise length must match feature length");
    ad::Graph g;
    Var z = sample_features(g.constant(Tensor::row(gf.mean)), g.constant(Tensor::row(gf.scale)), Tensor::row(noise),
                            mode, ramp, false);
    auto v = z.value().values();
    return {v.begin(), v.end()};
}

Var slot_layout(ad::Graph& g, std::size_t members, std::size_t slot_i, Var z_i, std::size_t slot_j, Var z_j) {
    if (slot_i == slot_j || slot_i >= members || slot_j >= members)
        throw std::out_of_range("invalid member slots");
    if (!z_i.value().same_shape(z_j.value()))
        throw ShapeError("paired features must have equal shape");
    Var zeros = g.constant(Tensor(z_i.rows(), z_i.cols()));
    std::vector<Var> parts(members, zeros);
    parts[slot_i] = z_i;
    parts[slot_j] = z_j;
    return ad::concat_cols(parts);
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty())
        return p;
    double mx = *std::max_element(p.begin(), p.end());
    double total = 0.0;
    for (double& v : p) {
        v = std::exp(v - mx);
        total += v;
    }
    for (double& v : p)
        v /= total;
    return p;
}

EnsembleOutputs predict_batch(const EnsembleModel& model, const Tensor& inputs) {
    const auto& c = model.config();
    EnsembleOutputs out;
    ad::Graph g;
    Var x = g.constant(inputs);
    Matrix prob_sum = Matrix::Zero(static_cast<Eigen::Index>(inputs.rows()), static_cast<Eigen::Index>(c.num_classes));
    Matrix logit_sum = prob_sum;
    for (std::size_t i = 0; i < c.members; ++i) {
        auto enc = model.encode(g, i, x, Grad::Frozen);
        Var logits = model.classify(g, i, enc.mean, Grad::Frozen);
        Tensor probs(Matrix(ad::log_softmax(logits).value().mat().array().exp()));
        prob_sum += probs.mat();
        logit_sum += logits.value().mat();
        out.member_logits.push_back(logits.value());
        out.member_probs.push_back(std::move(probs));
        out.member_means.push_back(enc.mean.value());
    }
    double inv_m = 1.0 / static_cast<double>(c.members);
    if (c.combine == Combine::Probabilities) {
        out.ensemble_probs = Tensor(Matrix(prob_sum * inv_m));
        out.ensemble_logits = Tensor(Matrix(out.ensemble_probs.mat().array().log()));
    } else {
        out.ensemble_logits = Tensor(Matrix(logit_sum * inv_m));
        ad::Graph h;
        out.ensemble_probs = Tensor(Matrix(ad::log_softmax(h.constant(out.ensemble_logits)).value().mat().array().exp()));
    }
    return out;
}

} // namespace dice
