#pragma once

// Regularization losses for continual training: the unsupervised inquiry
// representation loss, the combined objective, and the ablation baselines
// (forward-KL distillation, diagonal-Fisher EWC).  All gradients reuse the
// transformer's backward seam by injecting d(loss)/d(hidden) or
// d(loss)/d(logits).

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spcl/nn.hpp"
#include "spcl/tensor.hpp"

namespace spcl::reg {

// Read-only snapshot of the consolidated model entering the current stage.
template <typename S>
struct FrozenTeacherT {
    ParamSetT<S> params;
};
using FrozenTeacher = FrozenTeacherT<float>;

// Unlabeled inquiry text: inputs only, no targets.
struct InquiryBatch {
    std::vector<std::vector<int>> inputs;

    nn::Batch as_batch() const {
        nn::Batch b;
        b.inputs = inputs;
        return b;
    }
};

template <typename S>
struct LossGrad {
    double loss = 0.0;
    ParamSetT<S> grads;
};

// Per-sequence inquiry loss seam: the L2 norm of the flattened hidden-state
// difference, plus d(norm)/d(student_hidden) before batch averaging.  A zero
// difference gets a zero (sub)gradient.
template <typename S>
std::pair<double, std::vector<S>> uir_from_hidden(
    const std::vector<S>& student_hidden, const std::vector<S>& teacher_hidden) {
    if (student_hidden.size() != teacher_hidden.size())
        throw std::invalid_argument("uir: hidden state size mismatch");
    double sq = 0.0;
    for (std::size_t i = 0; i < student_hidden.size(); ++i) {
        double diff = double(student_hidden[i]) - double(teacher_hidden[i]);
        sq += diff * diff;
    }
    double norm = std::sqrt(sq);
    std::vector<S> dhidden(student_hidden.size(), S(0));
    if (norm > 0.0)
        for (std::size_t i = 0; i < student_hidden.size(); ++i)
            dhidden[i] = S((double(student_hidden[i]) -
                            double(teacher_hidden[i])) / norm);
    return {norm, std::move(dhidden)};
}

// Final hidden states of every inquiry sequence under fixed params.  The
// teacher side is constant for a whole stage, so callers cache this.
template <typename S>
std::vector<std::vector<S>> hidden_states(const nn::ModelConfig& cfg,
                                          const ParamSetT<S>& params,
                                          const InquiryBatch& batch) {
    if (batch.inputs.empty())
        throw std::invalid_argument("inquiry batch: no sequences");
    nn::validate_batch(cfg, batch.as_batch());
    std::vector<std::vector<S>> out;
    out.reserve(batch.inputs.size());
    for (const auto& seq : batch.inputs)
        out.push_back(nn::forward_seq(cfg, params, seq).hidden);
    return out;
}

// Mean over sequences of || h_student - h_teacher ||_2 with the gradient
// taken through the student only.  Teacher hiddens may be precomputed.
template <typename S>
LossGrad<S> uir_loss_cached(const nn::ModelConfig& cfg,
                            const ParamSetT<S>& student,
                            const std::vector<std::vector<S>>& teacher_hidden,
                            const InquiryBatch& batch) {
    if (batch.inputs.empty())
        throw std::invalid_argument("inquiry batch: no sequences");
    if (teacher_hidden.size() != batch.inputs.size())
        throw std::invalid_argument("uir: cached teacher hiddens mismatch");
    nn::validate_params(cfg, student);
    nn::validate_batch(cfg, batch.as_batch());

    const double inv_b = 1.0 / double(batch.inputs.size());
    LossGrad<S> out;
    out.grads = zeros_like(student);
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        auto tr = nn::forward_seq(cfg, student, batch.inputs[s]);
        auto [norm, dhidden] = uir_from_hidden(tr.hidden, teacher_hidden[s]);
        out.loss += norm * inv_b;
        for (auto& v : dhidden) v = S(double(v) * inv_b);
        nn::backward_seq(cfg, student, batch.inputs[s], tr, {}, dhidden,
                         out.grads);
    }
    return out;
}

template <typename S>
LossGrad<S> uir_loss(const nn::ModelConfig& cfg, const ParamSetT<S>& student,
                     const FrozenTeacherT<S>& teacher,
                     const InquiryBatch& batch) {
    require_compatible(student, teacher.params, "uir student/teacher");
    auto cached = hidden_states(cfg, teacher.params, batch);
    return uir_loss_cached(cfg, student, cached, batch);
}

template <typename S>
struct TotalObjective {
    double total = 0.0;
    double llava = 0.0;
    double uir = 0.0;
    ParamSetT<S> grads;
};

// L^t = L_llava + L_uir with fixed unit weights; the gradient is the sum of
// the component gradients.  An empty inquiry batch disables the UIR term,
// recovering plain task training.
template <typename S>
TotalObjective<S> total_objective(const nn::ModelConfig& cfg,
                                  const ParamSetT<S>& student,
                                  const FrozenTeacherT<S>& teacher,
                                  const nn::Batch& task_batch,
                                  const InquiryBatch& inquiry_batch) {
    TotalObjective<S> out;
    auto traces = nn::forward(cfg, student, task_batch);
    out.llava = nn::loss_ce(cfg, traces, task_batch);
    out.grads = nn::backward_ce(cfg, student, task_batch);
    if (!inquiry_batch.inputs.empty()) {
        LossGrad<S> u = uir_loss(cfg, student, teacher, inquiry_batch);
        out.uir = u.loss;
        add_in_place(out.grads, u.grads);
    }
    out.total = out.llava + out.uir;
    return out;
}

// Per-position forward KL seam: KL(teacher || student) of the two softmax
// rows, plus d(KL)/d(student_logits) before position averaging.
template <typename S>
std::pair<double, std::vector<S>> fkl_from_logits(
    const std::vector<S>& student_logits, const std::vector<S>& teacher_logits) {
    if (student_logits.size() != teacher_logits.size() ||
        student_logits.empty())
        throw std::invalid_argument("fkl: logits size mismatch");
    const std::size_t n = student_logits.size();
    auto log_softmax = [n](const std::vector<S>& row) {
        double hi = double(row[0]);
        for (std::size_t c = 1; c < n; ++c) hi = std::max(hi, double(row[c]));
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) z += std::exp(double(row[c]) - hi);
        double logz = hi + std::log(z);
        std::vector<double> out(n);
        for (std::size_t c = 0; c < n; ++c) out[c] = double(row[c]) - logz;
        return out;
    };
    std::vector<double> ls = log_softmax(student_logits);
    std::vector<double> lt = log_softmax(teacher_logits);
    double kl = 0.0;
    std::vector<S> dlogits(n);
    for (std::size_t c = 0; c < n; ++c) {
        double pt = std::exp(lt[c]);
        double ps = std::exp(ls[c]);
        kl += pt * (lt[c] - ls[c]);
        dlogits[c] = S(ps - pt);
    }
    return {kl, std::move(dlogits)};
}

// Forward KL(teacher || student) averaged over every token position of the
// batch; zero iff the softmax distributions match.
template <typename S>
LossGrad<S> fkl_loss(const nn::ModelConfig& cfg, const ParamSetT<S>& student,
                     const FrozenTeacherT<S>& teacher,
                     const InquiryBatch& batch) {
    require_compatible(student, teacher.params, "fkl student/teacher");
    if (batch.inputs.empty())
        throw std::invalid_argument("inquiry batch: no sequences");
    nn::validate_params(cfg, student);
    nn::validate_batch(cfg, batch.as_batch());

    std::size_t n_positions = 0;
    for (const auto& seq : batch.inputs) n_positions += seq.size();
    const double inv_n = 1.0 / double(n_positions);
    const std::size_t v = cfg.vocab_size;

    LossGrad<S> out;
    out.grads = zeros_like(student);
    for (const auto& seq : batch.inputs) {
        auto ts = nn::forward_seq(cfg, student, seq);
        auto tt = nn::forward_seq(cfg, teacher.params, seq);
        std::vector<S> dlogits(seq.size() * v, S(0));
        for (std::size_t t = 0; t < seq.size(); ++t) {
            std::vector<S> rs(ts.logits.begin() + t * v,
                              ts.logits.begin() + (t + 1) * v);
            std::vector<S> rt(tt.logits.begin() + t * v,
                              tt.logits.begin() + (t + 1) * v);
            auto [kl, drow] = fkl_from_logits(rs, rt);
            out.loss += kl * inv_n;
            for (std::size_t c = 0; c < v; ++c)
                dlogits[t * v + c] = S(double(drow[c]) * inv_n);
        }
        nn::backward_seq(cfg, student, seq, ts, dlogits, {}, out.grads);
    }
    return out;
}

// (lambda/2) * sum_j fisher_j * (student_j - anchor_j)^2
template <typename S>
double ewc_penalty(const ParamSetT<S>& student, const ParamSetT<S>& anchor,
                   const ParamSetT<S>& fisher, double lambda) {
    require_compatible(student, anchor, "ewc student/anchor");
    require_compatible(student, fisher, "ewc student/fisher");
    if (lambda < 0) throw std::invalid_argument("ewc: lambda must be >= 0");
    double acc = 0.0;
    auto ia = anchor.begin();
    auto im = fisher.begin();
    for (const auto& [name, t] : student) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double diff = double(t.data[i]) - double(ia->second.data[i]);
            acc += double(im->second.data[i]) * diff * diff;
        }
        ++ia;
        ++im;
    }
    return 0.5 * lambda * acc;
}

// d(penalty)/d(student) = lambda * fisher (.) (student - anchor)
template <typename S>
ParamSetT<S> ewc_grad(const ParamSetT<S>& student, const ParamSetT<S>& anchor,
                      const ParamSetT<S>& fisher, double lambda) {
    require_compatible(student, anchor, "ewc student/anchor");
    require_compatible(student, fisher, "ewc student/fisher");
    if (lambda < 0) throw std::invalid_argument("ewc: lambda must be >= 0");
    ParamSetT<S> out = zeros_like(student);
    auto ia = anchor.begin();
    auto im = fisher.begin();
    auto io = out.begin();
    for (const auto& [name, t] : student) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double diff = double(t.data[i]) - double(ia->second.data[i]);
            io->second.data[i] = S(lambda * double(im->second.data[i]) * diff);
        }
        ++ia;
        ++im;
        ++io;
    }
    return out;
}

// Empirical diagonal Fisher: the mean over sequences of the squared
// per-sequence cross-entropy gradient.
template <typename S>
ParamSetT<S> estimate_fisher(const nn::ModelConfig& cfg,
                             const ParamSetT<S>& params,
                             const nn::Batch& batch) {
    nn::validate_params(cfg, params);
    nn::validate_batch(cfg, batch);
    if (!batch.supervised())
        throw std::invalid_argument("fisher: batch must be supervised");
    ParamSetT<S> fisher = zeros_like(params);
    std::size_t used = 0;
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        nn::Batch one;
        one.inputs = {batch.inputs[s]};
        one.targets = {batch.targets[s]};
        one.mask = {batch.mask[s]};
        if (nn::count_supervised(one) == 0) continue;
        ParamSetT<S> g = nn::backward_ce(cfg, params, one);
        auto igf = fisher.begin();
        for (const auto& [name, t] : g) {
            for (std::size_t i = 0; i < t.data.size(); ++i)
                igf->second.data[i] += t.data[i] * t.data[i];
            ++igf;
        }
        ++used;
    }
    if (used == 0)
        throw std::invalid_argument("fisher: no supervised sequences");
    for (auto& [name, t] : fisher)
        for (auto& v : t.data) v = S(double(v) / double(used));
    return fisher;
}

} // namespace spcl::reg
