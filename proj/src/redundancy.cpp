#include "dice/redundancy.hpp"

#include "dice/error.hpp"

#include <cmath>
#include <stdexcept>

namespace dice {

using ad::Var;

void CrConfig::validate() const {
    if (!(tau > 0.0))
        throw std::invalid_argument("tau must be positive");
    if (num_s < 1 || neg_per_pos < 1 || nstep_d < 1)
        throw std::invalid_argument("num_s, neg_per_pos and nstep_d must be at least 1");
}

ClassMemoryBank::ClassMemoryBank(std::size_t members, std::size_t classes, std::size_t feature_dim,
                                 std::size_t capacity)
    : members_(members), classes_(classes), feature_dim_(feature_dim), capacity_(capacity),
      buffers_(members * classes), cursor_(members * classes, 0) {
    if (capacity == 0)
        throw std::invalid_argument("bank capacity must be positive");
}

std::size_t ClassMemoryBank::slot(std::size_t member, int label) const {
    if (member >= members_ || label < 0 || static_cast<std::size_t>(label) >= classes_)
        throw std::out_of_range("bank slot out of range");
    return member * classes_ + static_cast<std::size_t>(label);
}

void ClassMemoryBank::push(std::size_t member, int label, std::span<const double> z, std::size_t input_id) {
    if (z.size() != feature_dim_)
        throw ShapeError("bank entry has the wrong feature width");
    auto s = slot(member, label);
    Entry e{{z.begin(), z.end()}, input_id};
    auto& buf = buffers_[s];
    if (buf.size() < capacity_) {
        buf.push_back(std::move(e));
    } else {
        buf[cursor_[s]] = std::move(e);
    }
    cursor_[s] = (cursor_[s] + 1) % capacity_;
}

std::span<const ClassMemoryBank::Entry> ClassMemoryBank::entries(std::size_t member, int label) const {
    return buffers_[slot(member, label)];
}

std::size_t ClassMemoryBank::stored_scalars() const {
    std::size_t n = 0;
    for (const auto& b : buffers_)
        n += b.size() * feature_dim_;
    return n;
}

const ClassMemoryBank::Entry* ClassMemoryBank::sample_same_class(std::size_t member, int label,
                                                                 std::size_t exclude_id, Rng& rng) const {
    const auto& buf = buffers_[slot(member, label)];
    std::vector<const Entry*> eligible;
    for (const auto& e : buf) {
        if (e.input_id != exclude_id)
            eligible.push_back(&e);
    }
    if (eligible.empty())
        return nullptr;
    return eligible[rng.index(eligible.size())];
}

const ClassMemoryBank::Entry* ClassMemoryBank::sample_any_class(std::size_t member, std::size_t exclude_id,
                                                                Rng& rng) const {
    std::vector<const Entry*> eligible;
    for (std::size_t y = 0; y < classes_; ++y) {
        for (const auto& e : buffers_[slot(member, static_cast<int>(y))]) {
            if (e.input_id != exclude_id)
                eligible.push_back(&e);
        }
    }
    if (eligible.empty())
        return nullptr;
    return eligible[rng.index(eligible.size())];
}

std::vector<std::pair<std::size_t, std::size_t>> member_pairs(std::size_t members) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < members; ++i)
        for (std::size_t j = i + 1; j < members; ++j)
            pairs.emplace_back(i, j);
    return pairs;
}

namespace {

void check_features(const MemberSamples& features, std::size_t batch) {
    if (features.size() < 2)
        throw std::invalid_argument("redundancy needs at least two members");
    for (const auto& m : features) {
        if (m.empty() || m.size() != features[0].size())
            throw std::invalid_argument("every member needs the same number of samples");
        for (const auto& v : m) {
            if (v.rows() != batch)
                throw ShapeError("feature rows must match the batch size");
        }
    }
}

} // namespace

TripleBatch sample_joint_batch(ad::Graph& g, const MemberSamples& features, std::span<const int> labels,
                               std::span<const std::size_t> ids) {
    if (labels.empty() || ids.size() != labels.size())
        throw std::invalid_argument("joint batch needs at least one labelled input");
    check_features(features, labels.size());
    const auto pairs = member_pairs(features.size());
    const std::size_t num_s = features[0].size();
    TripleBatch out;
    std::vector<Var> blocks;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        auto [i, j] = pairs[p];
        for (std::size_t k = 0; k < num_s; ++k) {
            blocks.push_back(slot_layout(g, features.size(), i, features[i][k], j, features[j][k]));
            for (std::size_t n = 0; n < labels.size(); ++n) {
                out.labels.push_back(labels[n]);
                out.pair.push_back(p);
                out.source.push_back(ids[n]);
                out.partner.push_back(ids[n]);
            }
        }
    }
    out.input = ad::concat_rows(blocks);
    return out;
}

TripleBatch sample_product_batch(ad::Graph& g, const ClassMemoryBank& bank, const MemberSamples& features,
                                 std::span<const int> labels, std::span<const std::size_t> ids,
                                 std::size_t neg_per_pos, bool conditional, Rng& rng) {
    if (labels.empty() || ids.size() != labels.size())
        throw std::invalid_argument("product batch needs at least one labelled input");
    if (neg_per_pos < 1)
        throw std::invalid_argument("neg_per_pos must be at least 1");
    check_features(features, labels.size());
    const std::size_t d = bank.feature_dim();
    const auto pairs = member_pairs(features.size());
    const std::size_t num_s = features[0].size();
    TripleBatch out;
    std::vector<Var> blocks;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        auto [i, j] = pairs[p];
        for (std::size_t k = 0; k < num_s; ++k) {
            std::vector<int> rows;
            std::vector<const ClassMemoryBank::Entry*> partners;
            for (std::size_t n = 0; n < labels.size(); ++n) {
                for (std::size_t r = 0; r < neg_per_pos; ++r) {
                    const auto* e = conditional ? bank.sample_same_class(j, labels[n], ids[n], rng)
                                                : bank.sample_any_class(j, ids[n], rng);
                    if (e == nullptr) {
                        ++out.skipped;
                        continue;
                    }
                    rows.push_back(static_cast<int>(n));
                    partners.push_back(e);
                    out.labels.push_back(labels[n]);
                    out.pair.push_back(p);
                    out.source.push_back(ids[n]);
                    out.partner.push_back(e->input_id);
                }
            }
            if (rows.empty())
                continue;
            Tensor partner_z(partners.size(), d);
            for (std::size_t r = 0; r < partners.size(); ++r)
                std::copy(partners[r]->z.begin(), partners[r]->z.end(), partner_z.row_span(r).begin());
            Var zi = ad::gather_rows(features[i][k], rows);
            blocks.push_back(slot_layout(g, features.size(), i, zi, j, g.constant(std::move(partner_z))));
        }
    }
    if (!blocks.empty())
        out.input = ad::concat_rows(blocks);
    return out;
}

Var discriminator_logits(const EnsembleModel& model, ad::Graph& g, const TripleBatch& batch, Grad mode) {
    if (batch.empty())
        throw std::invalid_argument("empty triple batch");
    return model.discriminate_logits(g, batch.input, batch.labels, mode);
}

double clipped_ratio(double w_out, double tau) {
    if (!(w_out > 0.0 && w_out < 1.0))
        throw std::invalid_argument("discriminator output must lie in (0, 1)");
    if (!(tau > 0.0))
        throw std::invalid_argument("tau must be positive");
    double log_f = std::log(w_out / (1.0 - w_out));
    if (std::isinf(tau))
        return std::exp(log_f);
    return std::exp(tau * std::tanh(log_f / tau));
}

Var clipped_log_ratio(Var logits, double tau) {
    if (!(tau > 0.0))
        throw std::invalid_argument("tau must be positive");
    if (std::isinf(tau))
        return logits;
    return ad::scale(ad::tanh(ad::scale(logits, 1.0 / tau)), tau);
}

double discriminator_loss(std::span<const double> joint_w, std::span<const double> product_w) {
    if (joint_w.empty() || product_w.empty())
        throw std::invalid_argument("discriminator loss needs joint and product triples");
    double total = 0.0;
    for (double w : joint_w)
        total += std::log(w);
    for (double w : product_w)
        total += std::log1p(-w);
    return -total / static_cast<double>(joint_w.size() + product_w.size());
}

Var discriminator_loss(Var joint_logits, Var product_logits) {
    if (joint_logits.value().size() == 0 || product_logits.value().size() == 0)
        throw std::invalid_argument("discriminator loss needs joint and product triples");
    // -log sigmoid(a) = softplus(-a);  -log(1 - sigmoid(a)) = softplus(a)
    Var pos = ad::sum(ad::softplus(ad::neg(joint_logits)));
    Var negs = ad::sum(ad::softplus(product_logits));
    double n = static_cast<double>(joint_logits.value().size() + product_logits.value().size());
    return ad::scale(ad::add(pos, negs), 1.0 / n);
}

namespace {

double log_mean_exp(std::span<const double> v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v)
        mx = std::max(mx, x);
    double s = 0.0;
    for (double x : v)
        s += std::exp(x - mx);
    return mx + std::log(s / static_cast<double>(v.size()));
}

std::vector<double> clipped_logs(std::span<const double> w, double tau) {
    std::vector<double> out;
    out.reserve(w.size());
    for (double x : w)
        out.push_back(std::log(clipped_ratio(x, tau)));
    return out;
}

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v)
        s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

double cr_estimate(std::span<const double> joint_w, std::span<const double> product_w, double tau) {
    if (joint_w.empty() || product_w.empty())
        throw std::invalid_argument("CR estimate needs joint and product triples");
    return mean_of(clipped_logs(joint_w, tau)) - log_mean_exp(clipped_logs(product_w, tau));
}

Var cr_estimate(Var joint_logits, Var product_logits, double tau) {
    if (joint_logits.value().size() == 0 || product_logits.value().size() == 0)
        throw std::invalid_argument("CR estimate needs joint and product triples");
    return cr_member_loss(joint_logits, &product_logits, tau);
}

Var cr_member_loss(Var joint_logits, const Var* product_logits, double tau) {
    if (joint_logits.value().size() == 0)
        throw std::invalid_argument("CR member loss needs joint triples");
    Var lhs = ad::mean(clipped_log_ratio(joint_logits, tau));
    if (product_logits == nullptr)
        return lhs;
    double n = static_cast<double>(product_logits->value().size());
    if (n == 0)
        throw std::invalid_argument("CR member loss: empty product batch");
    Var log_mean = ad::add_scalar(ad::logsumexp(clipped_log_ratio(*product_logits, tau)), -std::log(n));
    return ad::sub(lhs, log_mean);
}

double cr_member_loss(std::span<const double> joint_w, std::span<const double> product_w, double tau,
                      bool include_rhs) {
    if (joint_w.empty())
        throw std::invalid_argument("CR member loss needs joint triples");
    double lhs = mean_of(clipped_logs(joint_w, tau));
    if (!include_rhs)
        return lhs;
    if (product_w.empty())
        throw std::invalid_argument("CR member loss: empty product batch");
    return lhs - log_mean_exp(clipped_logs(product_w, tau));
}

} // namespace dice
