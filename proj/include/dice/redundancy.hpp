#pragma once

#include "dice/autodiff.hpp"
#include "dice/models.hpp"
#include "dice/random.hpp"

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace dice {

struct CrConfig {
    double tau = 10.0;            // tanh-clip threshold; +inf disables clipping
    std::size_t num_s = 4;        // feature samples per input
    std::size_t neg_per_pos = 4;  // product triples per joint triple
    std::size_t nstep_d = 4;      // discriminator steps per member step
    bool include_rhs = false;     // add the -log E_product[f] term to the member loss

    void validate() const;
};

/// Per (member, class) ring buffers of recently sampled features, used to
/// draw same-class partners from other inputs.
class ClassMemoryBank {
public:
    struct Entry {
        std::vector<double> z;
        std::size_t input_id = 0;
    };

    ClassMemoryBank(std::size_t members, std::size_t classes, std::size_t feature_dim, std::size_t capacity = 4);

    void push(std::size_t member, int label, std::span<const double> z, std::size_t input_id);
    std::span<const Entry> entries(std::size_t member, int label) const;
    std::size_t capacity() const { return capacity_; }
    std::size_t members() const { return members_; }
    std::size_t classes() const { return classes_; }
    std::size_t feature_dim() const { return feature_dim_; }
    /// Total number of stored scalars (bounded by M * d * K * capacity).
    std::size_t stored_scalars() const;

    /// Uniform draw among stored entries of (member, label) whose input id
    /// differs from `exclude_id`; nullptr when none qualifies.
    const Entry* sample_same_class(std::size_t member, int label, std::size_t exclude_id, Rng& rng) const;
    /// Uniform draw among entries of `member` from any class.
    const Entry* sample_any_class(std::size_t member, std::size_t exclude_id, Rng& rng) const;

private:
    std::size_t slot(std::size_t member, int label) const;

    std::size_t members_, classes_, feature_dim_, capacity_;
    std::vector<std::vector<Entry>> buffers_;
    std::vector<std::size_t> cursor_;
};

/// Discriminator input rows with provenance for each row.
struct TripleBatch {
    ad::Var input;                     // rows x (M * d), slot layout
    std::vector<int> labels;           // class y per row
    std::vector<std::size_t> pair;     // index into the pair list
    std::vector<std::size_t> source;   // input id feeding slot i
    std::vector<std::size_t> partner;  // input id feeding slot j
    std::size_t skipped = 0;           // product triples dropped for lack of a partner

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
};

/// Unordered member pairs (i < j), in lexicographic order.
std::vector<std::pair<std::size_t, std::size_t>> member_pairs(std::size_t members);

/// Current-step features: features[m][k] is the B x d sample k of member m.
using MemberSamples = std::vector<std::vector<ad::Var>>;

/// Joint triples: both features from the same input, for every pair (i < j)
/// and every sample index k. Rows are ordered pair-major, then k, then input.
TripleBatch sample_joint_batch(ad::Graph& g, const MemberSamples& features, std::span<const int> labels,
                               std::span<const std::size_t> ids);

/// Product triples: z_i from the current input in slot i and, for each joint
/// triple, `neg_per_pos` partners z_j' drawn from the bank for a different
/// input (same class when `conditional`). Triples without a partner are
/// skipped and counted.
TripleBatch sample_product_batch(ad::Graph& g, const ClassMemoryBank& bank, const MemberSamples& features,
                                 std::span<const int> labels, std::span<const std::size_t> ids,
                                 std::size_t neg_per_pos, bool conditional, Rng& rng);

/// Discriminator logits for every row of a triple batch.
ad::Var discriminator_logits(const EnsembleModel& model, ad::Graph& g, const TripleBatch& batch, Grad mode);

/// exp(tau * tanh(log(w / (1 - w)) / tau)). Throws if w is outside (0, 1).
double clipped_ratio(double w_out, double tau);
/// tau * tanh(a / tau) for discriminator logits a (the log of the clipped ratio).
ad::Var clipped_log_ratio(ad::Var logits, double tau);

/// Binary cross-entropy, joint labelled 1 and product 0, averaged over the union.
double discriminator_loss(std::span<const double> joint_w, std::span<const double> product_w);
ad::Var discriminator_loss(ad::Var joint_logits, ad::Var product_logits);

/// Donsker-Varadhan estimate: mean_joint log f - log mean_product f.
double cr_estimate(std::span<const double> joint_w, std::span<const double> product_w, double tau);
ad::Var cr_estimate(ad::Var joint_logits, ad::Var product_logits, double tau);

/// Member-side adversarial loss: mean_joint log f, plus the
/// -log mean_product f term when `product_logits` is given.
ad::Var cr_member_loss(ad::Var joint_logits, const ad::Var* product_logits, double tau);
double cr_member_loss(std::span<const double> joint_w, std::span<const double> product_w, double tau,
                      bool include_rhs);

/// Unconditional redundancy: identical estimators; the difference lies in an
/// unconditional discriminator and any-class product partners.
inline double r_estimate(std::span<const double> joint_w, std::span<const double> product_w, double tau) {
    return cr_estimate(joint_w, product_w, tau);
}
inline ad::Var r_member_loss(ad::Var joint_logits, const ad::Var* product_logits, double tau) {
    return cr_member_loss(joint_logits, product_logits, tau);
}

} // namespace dice
