#include "veco/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "veco/errors.hpp"

namespace veco {

PretrainObjective parse_objective(const std::string& name) {
    if (name == "camlm" || name == "ca-mlm") return PretrainObjective::CaMlm;
    if (name == "mlm") return PretrainObjective::MlmOnly;
    throw DataError("unknown objective '" + name + "' (camlm|mlm)");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

MetricsWriter::MetricsWriter(const std::string& path, const std::vector<std::string>& columns) {
    os_.open(path);
    if (!os_) throw DataError("cannot write metrics file " + path);
    row(columns);
}

void MetricsWriter::row(const std::vector<std::string>& cells) {
    if (!os_.is_open()) return;
    for (size_t i = 0; i < cells.size(); ++i) {
        if (i) os_ << '\t';
        os_ << cells[i];
    }
    os_ << '\n';
    os_.flush();
}

std::vector<std::string> metrics_header() {
    return {"step", "kind", "lr", "x_self", "x_cross", "y_self", "y_cross", "tlm", "total"};
}

std::vector<std::string> metrics_cells(const StepMetrics& m) {
    return {std::to_string(m.step), m.kind,          fmt_double(m.lr),
            fmt_double(m.x_self),   fmt_double(m.x_cross), fmt_double(m.y_self),
            fmt_double(m.y_cross),  fmt_double(m.tlm),     fmt_double(m.total)};
}

Pretrainer::Pretrainer(Model& model, BatchIterator& iterator, PretrainConfig cfg,
                       std::uint64_t seed)
    : model_(model), iterator_(iterator), cfg_(cfg), trainer_rng_(seed) {
    cfg_.schedule.validate();
    adam_.config = cfg_.adam;
}

Checkpoint Pretrainer::make_checkpoint() const {
    Checkpoint ckpt = checkpoint_from_model(model_, &adam_);
    ckpt.step = steps_done_;
    std::ostringstream os;
    iterator_.save_state(os);
    os << "trainer-rng\n" << serialize_rng(trainer_rng_) << '\n';
    ckpt.rng_state = os.str();
    return ckpt;
}

Checkpoint Pretrainer::snapshot() const { return make_checkpoint(); }

void Pretrainer::resume_from(const Checkpoint& ckpt) {
    restore_model(model_, ckpt);
    restore_adam(adam_, ckpt);
    std::istringstream is(ckpt.rng_state);
    iterator_.load_state(is);
    std::string tag;
    is >> tag;
    if (tag != "trainer-rng") throw DataError("checkpoint rng blob is missing the trainer state");
    is >> trainer_rng_;
    steps_done_ = ckpt.step;
}

Checkpoint Pretrainer::run(MetricsWriter* metrics, const std::string& ckpt_path) {
    bool ca = cfg_.objective == PretrainObjective::CaMlm;
    Rng* drop_rng = model_.config.dropout > 0.0 ? &trainer_rng_ : nullptr;

    while (steps_done_ < cfg_.total_steps()) {
        std::int64_t step = steps_done_ + 1;
        bool phase1 = step <= cfg_.phase1_steps;
        Batch batch = iterator_.next();

        Tape tape;
        StepMetrics m;
        m.step = step;
        m.kind = batch.kind == BatchKind::Mono ? "mono" : "bili";

        Tensor total;
        if (ca) {
            CaMlmLoss loss = ca_mlm_loss(model_, batch.pair, drop_rng);
            total = loss.total;
            m.x_self = loss.x_self.scalar_value();
            m.x_cross = loss.x_cross.scalar_value();
            m.y_self = loss.y_self.scalar_value();
            m.y_cross = loss.y_cross.scalar_value();
        } else {
            // Ablation arm: the objective without the S-stream terms.
            MaskedBatch both;
            both.rows = batch.pair.x.rows;
            both.rows.insert(both.rows.end(), batch.pair.y.rows.begin(), batch.pair.y.rows.end());
            total = tlm_loss(model_, both, drop_rng);  // plain masked-LM over h-stream rows
            m.x_self = total.scalar_value();
        }
        if (batch.kind == BatchKind::Bilingual) {
            Tensor tlm = tlm_loss(model_, batch.tlm, drop_rng);
            m.tlm = tlm.scalar_value();
            total = add(total, tlm);
        }
        m.total = total.scalar_value();
        if (!std::isfinite(m.total)) {
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               "; last periodic checkpoint retained");
        }

        tape.backward(total);

        NamedParams active = phase1 ? model_.params.cross_params() : model_.params.named_tensors();
        double lr = lr_at(step, cfg_.schedule);
        m.lr = lr;
        clip_grad_norm(active, cfg_.clip_norm);
        adam_step(active, adam_, lr);
        zero_grads(model_.params.named_tensors());

        steps_done_ = step;
        history_.push_back(m);
        if (metrics) metrics->row(metrics_cells(m));

        if (!ckpt_path.empty() && cfg_.ckpt_every > 0 && step % cfg_.ckpt_every == 0) {
            save_checkpoint(make_checkpoint(), ckpt_path);
        }
    }

    Checkpoint final_ckpt = make_checkpoint();
    if (!ckpt_path.empty()) save_checkpoint(final_ckpt, ckpt_path);
    return final_ckpt;
}

}  // namespace veco
