// Shared toy setups for the trainer-level tests.
#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "gmmjepa/gradsuite.hpp"
#include "gmmjepa/trainer.hpp"

namespace fixture {

using namespace gmmjepa;

struct World {
  trainer::PreparedCorpus corpus;
  cluster::GmmModel gmm;
  std::vector<cluster::PosteriorSeq> targets;
  trainer::TrainerSetup setup;
  audio::MelOptions mel;
};

inline World tiny_world(std::size_t steps = 6, std::uint64_t seed = 0) {
  World w;
  audio::SynthCorpusSpec sp;
  sp.n_utterances = 6;
  sp.duration_min_s = 0.4;
  sp.duration_max_s = 0.6;
  sp.seed = 3;
  w.mel.n_mels = 6;
  w.corpus = trainer::prepare_corpus(audio::synth_corpus(sp), w.mel);
  cluster::GmmFitOptions go;
  go.K = 4;
  go.epochs = 3;
  go.batch = 32;
  go.seed = 1;
  w.gmm = cluster::gmm_fit_minibatch(trainer::stack_frames(w.corpus), go);
  w.gmm.freeze();
  w.targets = trainer::compute_targets(cluster::TargetModel(w.gmm), w.corpus);
  w.setup.encoder = gradsuite::micro_config();
  w.setup.train.T_max = steps;
  w.setup.train.batch_size = 2;
  w.setup.train.max_frames = 12;
  w.setup.train.checkpoint_every = 2;
  w.setup.train.seed = seed;
  w.setup.mask.span_min = 2;
  w.setup.mask.span_max = 4;
  return w;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gmmjepa_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixture
