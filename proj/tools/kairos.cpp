#include <iostream>

#include "CLI11.hpp"
#include "kairos/cli.hpp"

namespace kc = kairos::cli;

int main(int argc, char** argv) {
  CLI::App app{"KairosHope time-series classification pipeline"};
  app.require_subcommand(1);

  kc::PretrainOptions pre;
  auto* p = app.add_subcommand("pretrain", "Self-supervised pretraining on unlabeled series");
  p->add_option("--corpus", pre.corpus, "Label-first series files")->required();
  p->add_option("--config", pre.config, "key = value config file");
  p->add_option("--seed", pre.seed, "Seed for every random stream");
  p->add_option("--out", pre.out, "Output directory")->required();

  kc::FinetuneOptions ft;
  auto* f = app.add_subcommand("finetune", "Linear probing then full fine-tuning");
  f->add_option("--train", ft.train, "Training split")->required();
  f->add_option("--test", ft.test, "Test split")->required();
  f->add_option("--checkpoint", ft.checkpoint, "Pretrained checkpoint (default: from scratch)");
  f->add_option("--config", ft.config, "key = value config file");
  f->add_option("--seed", ft.seed, "Seed for every random stream");
  f->add_option("--out", ft.out, "Output directory")->required();

  kc::EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a fine-tuned checkpoint");
  e->add_option("--test", ev.test, "Test split")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Fine-tuned checkpoint")->required();
  e->add_option("--out", ev.out, "Output directory");

  kc::FeaturesOptions fe;
  auto* x = app.add_subcommand("features", "Per-series statistical features");
  x->add_option("--data", fe.data, "Series file")->required();
  x->add_option("--out", fe.out, "Output CSV")->required();

  kc::GradcheckOptions gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every layer");
  g->add_option("--config", gc.config, "Overrides of the check model");
  g->add_option("--seed", gc.seed, "Seed");
  g->add_option("--tol", gc.tol, "Relative tolerance")->capture_default_str();
  g->add_option("--out", gc.out, "Output directory");

  kc::BenchOptions bo;
  auto* b = app.add_subcommand("bench", "Encoder forward cost per sequence length");
  b->add_option("--lengths", bo.lengths, "Token counts")->delimiter(',')->capture_default_str();
  b->add_option("--runs", bo.runs, "Timed runs per length (median reported)")->capture_default_str();
  b->add_option("--batch", bo.batch, "Series per forward")->capture_default_str();
  b->add_option("--config", bo.config, "Model config file");
  b->add_option("--out", bo.out, "Output directory");

  kc::ManifestOptions mo;
  auto* m = app.add_subcommand("manifest", "Dataset manifest with the benchmark filter verdict");
  m->add_option("--data", mo.train_files, "*_TRAIN files")->required();
  m->add_option("--out", mo.out, "Output CSV")->required();

  kc::SynthOptions so;
  auto* s = app.add_subcommand("synth", "Write a synthetic labeled corpus");
  s->add_option("--kinds", so.kinds, "sine|ar1|square|trend-mix")->delimiter(',')->capture_default_str();
  s->add_option("--n", so.n, "Series count")->capture_default_str();
  s->add_option("--length", so.length, "Series length")->capture_default_str();
  s->add_option("--seed", so.seed, "Seed")->capture_default_str();
  s->add_option("--out", so.out, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kc::kConfig;
  }

  return kc::guarded([&] {
    if (*p) return kc::cmd_pretrain(pre);
    if (*f) return kc::cmd_finetune(ft);
    if (*e) return kc::cmd_eval(ev);
    if (*x) return kc::cmd_features(fe);
    if (*g) return kc::cmd_gradcheck(gc);
    if (*b) return kc::cmd_bench(bo);
    if (*m) return kc::cmd_manifest(mo);
    return kc::cmd_synth(so);
  });
}
