// Instance generator: a stack of FUSE conv modules (pointwise + axis-wise
// depthwise kernels only) followed by a full-height frequency-depthwise
// collapse and a pointwise mix, turning a log-mel spectrogram into a bag of
// instance vectors. Also holds the per-instance detector head.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milscene/ops.hpp"
#include "milscene/tensor.hpp"

namespace milscene {

struct ConvSpec {
  enum class Kind { Standard, DepthwiseSeparable, SpatiallySeparable };
  int c_in = 0;
  int c_out = 0;
  int k_h = 0;
  int k_w = 0;
  Kind kind = Kind::Standard;
};

// Parameter complexity of one convolutional layer:
//   standard             c_in * c_out * k_h * k_w
//   depthwise separable  c_out * (c_in + k_h * k_w)
//   spatially separable  c_out * (c_in + k_h + k_w)
int64_t conv_param_count(const ConvSpec& spec);

struct FuseModuleSpec {
  int n_blocks = 3;
  int c_out = 0;
  bool pool = true;
};

struct FuseNetConfig {
  int in_freq = 256;
  std::vector<FuseModuleSpec> modules{{3, 32, true}, {3, 64, true}, {3, 128, true},
                                      {3, 256, false}};
  int instance_dim = 256;
  int n_classes = 10;

  int pool_count() const;
  int min_frames() const;   // smallest T the generator accepts (one instance)
  int final_freq() const;   // frequency extent entering the collapse kernel
  void validate() const;
};

struct BagOfInstances {
  TensorPtr vectors;  // (N, d)
  std::string clip_id;

  int n() const { return vectors->dim(0); }
  int dim() const { return vectors->dim(1); }
};

class FuseNet {
 public:
  FuseNet(FuseNetConfig cfg, uint64_t seed);

  const FuseNetConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // One FUSE module: pointwise stem, n depthwise blocks, skip-sum of every
  // stage output, optional 2x2 max pool. x: (C_in,H,W) or (B,C_in,H,W).
  TensorPtr module_forward(int module_index, const TensorPtr& x, NormMode mode);

  // All modules plus the instance-vector tail: (1,F,T)-(B,1,F,T) in,
  // (d,1,N)-(B,d,1,N) out with N = floor(T / 2^pool_count).
  TensorPtr generator_forward(const TensorPtr& x, NormMode mode);

  // Single clip to a bag: (1,F,T) -> (N,d).
  TensorPtr bag_forward(const TensorPtr& x, NormMode mode);
  BagOfInstances make_bag(const TensorPtr& x, NormMode mode, std::string clip_id);

  // Batched clips to per-clip bags: (B,1,F,T) -> B x (N,d).
  std::vector<TensorPtr> bags_forward(const TensorPtr& x, NormMode mode);

  // Detector head: (N,d) -> (N,C) pre-activation scores.
  TensorPtr detector_logits(const TensorPtr& bag) const;

  TensorPtr detector_w() const { return det_w_; }
  TensorPtr detector_b() const { return det_b_; }

 private:
  struct BnLayer {
    TensorPtr gamma;
    TensorPtr beta;
    BatchNormState state;
  };
  struct Block {
    TensorPtr fdw;
    BnLayer bn1;
    TensorPtr tdw;
    BnLayer bn2;
  };
  struct Module {
    TensorPtr pw;
    BnLayer bn0;
    std::vector<Block> blocks;
    bool pool = true;
  };

  BnLayer add_bn(const std::string& prefix, int channels);

  FuseNetConfig cfg_;
  ParamSet params_;
  std::vector<Module> modules_;
  TensorPtr tail_fdw_;  // (c_last, final_freq)
  TensorPtr tail_pw_;   // (instance_dim, c_last)
  TensorPtr det_w_;     // (n_classes, instance_dim)
  TensorPtr det_b_;     // (n_classes)
};

struct ParamReportRow {
  std::string stage;
  std::string name;
  Shape shape;
  int64_t count = 0;
};

struct ParamReport {
  std::vector<ParamReportRow> rows;
  int64_t total = 0;
};

// Itemized trainable-parameter counts, grouped by pipeline stage.
ParamReport model_param_report(const FuseNet& model);

}  // namespace milscene
