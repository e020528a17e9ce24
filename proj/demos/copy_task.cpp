// Trains a small transformer with the BAI term on the copy task and decodes
// a few validation samples.
//
//   demo_copy_task [epochs]

#include <cstdlib>
#include <iostream>

#include "bai/train.hpp"

int main(int argc, char** argv) {
    bai::TrainConfig cfg;
    for (const char* kv : {"model.hidden=32", "model.ff=64", "model.heads=4", "model.vocab=0", "task.train=2000", "task.valid=200",
                           "train.lr_kind=fixed", "train.lr=2e-3", "train.bleu_samples=50", "bai.phi=1", "bai.gamma=0.5"})
        bai::apply_override(cfg, kv);
    cfg.epochs = argc > 1 ? static_cast<std::size_t>(std::atoi(argv[1])) : 3;

    const auto ds = bai::make_dataset(cfg.task);
    bai::TrainHooks hooks;
    hooks.on_record = [](const bai::MetricRecord& r) {
        if (r.phase == "valid")
            std::cout << "epoch " << r.epoch << ": ce " << r.ce << ", beta " << r.beta << ", lambda " << r.lambda << ", accuracy "
                      << r.valid_token_accuracy << ", bleu " << r.valid_bleu << "\n";
    };
    auto res = bai::train<float>(cfg, ds, "", nullptr, hooks);

    for (std::size_t i = 0; i < 5 && i < ds.valid.size(); ++i) {
        const auto& s = ds.valid[i];
        const auto out = bai::beam_search(res.model, s.src, {4, cfg.decode_max_steps, 0.0});
        std::cout << ds.vocab.decode(s.src) << "  ->  " << ds.vocab.decode(out.tokens) << "\n";
    }
    return 0;
}
