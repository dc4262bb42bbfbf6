#include "milscene/fusenet.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace milscene {

int64_t conv_param_count(const ConvSpec& spec) {
  if (spec.c_in <= 0 || spec.c_out <= 0 || spec.k_h <= 0 || spec.k_w <= 0)
    throw std::invalid_argument("conv_param_count: all spec fields must be positive");
  const int64_t c_in = spec.c_in, c_out = spec.c_out, k_h = spec.k_h, k_w = spec.k_w;
  switch (spec.kind) {
    case ConvSpec::Kind::Standard:
      return c_in * c_out * k_h * k_w;
    case ConvSpec::Kind::DepthwiseSeparable:
      return c_out * (c_in + k_h * k_w);
    case ConvSpec::Kind::SpatiallySeparable:
      return c_out * (c_in + k_h + k_w);
  }
  return 0;
}

int FuseNetConfig::pool_count() const {
  int n = 0;
  for (const auto& m : modules)
    if (m.pool) ++n;
  return n;
}

int FuseNetConfig::min_frames() const { return 1 << pool_count(); }

int FuseNetConfig::final_freq() const { return in_freq >> pool_count(); }

void FuseNetConfig::validate() const {
  if (modules.empty()) throw std::invalid_argument("fusenet: at least one module required");
  for (const auto& m : modules) {
    if (m.n_blocks < 1) throw std::invalid_argument("fusenet: n_blocks must be >= 1");
    if (m.c_out < 1) throw std::invalid_argument("fusenet: module channels must be >= 1");
  }
  if (in_freq % (1 << pool_count()) != 0)
    throw std::invalid_argument("fusenet: in_freq must be divisible by 2^pool_count");
  if (instance_dim < 1 || n_classes < 2)
    throw std::invalid_argument("fusenet: bad instance_dim or n_classes");
}

namespace {
constexpr int kBlockKernel = 3;  // FDW/TDW kernel length inside blocks
}

FuseNet::BnLayer FuseNet::add_bn(const std::string& prefix, int channels) {
  BnLayer bn;
  bn.gamma = params_.add(prefix + ".g", make_tensor({channels}, 1.0));
  bn.beta = params_.add(prefix + ".b", make_tensor({channels}, 0.0));
  bn.state.running_mean = params_.add_buffer(prefix + ".rm", make_tensor({channels}, 0.0));
  bn.state.running_var = params_.add_buffer(prefix + ".rv", make_tensor({channels}, 1.0));
  return bn;
}

FuseNet::FuseNet(FuseNetConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto he_normal = [&rng](const TensorPtr& t, int fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (double& v : t->data) v = dist(rng);
  };

  int c_in = 1;
  for (size_t i = 0; i < cfg_.modules.size(); ++i) {
    const auto& spec = cfg_.modules[i];
    const std::string pfx = "fm" + std::to_string(i + 1);
    Module mod;
    mod.pool = spec.pool;
    mod.pw = params_.add(pfx + ".pw.w", make_tensor({spec.c_out, c_in}));
    he_normal(mod.pw, c_in);
    mod.bn0 = add_bn(pfx + ".pw.bn", spec.c_out);
    for (int k = 0; k < spec.n_blocks; ++k) {
      const std::string bpfx = pfx + ".blk" + std::to_string(k + 1);
      Block blk;
      blk.fdw = params_.add(bpfx + ".fdw.w", make_tensor({spec.c_out, kBlockKernel}));
      he_normal(blk.fdw, kBlockKernel);
      blk.bn1 = add_bn(bpfx + ".bn1", spec.c_out);
      blk.tdw = params_.add(bpfx + ".tdw.w", make_tensor({spec.c_out, kBlockKernel}));
      he_normal(blk.tdw, kBlockKernel);
      blk.bn2 = add_bn(bpfx + ".bn2", spec.c_out);
      mod.blocks.push_back(std::move(blk));
    }
    modules_.push_back(std::move(mod));
    c_in = spec.c_out;
  }

  // The tail and detector are purely linear (no normalization follows), so
  // they start small enough that initial confidences sit near 0.5; He-style
  // scales here saturate the sigmoids before the first step.
  auto lecun_normal = [&rng](const TensorPtr& t, int fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / fan_in));
    for (double& v : t->data) v = dist(rng);
  };
  const int f_final = cfg_.final_freq();
  tail_fdw_ = params_.add("ivg.fdw.w", make_tensor({c_in, f_final}));
  lecun_normal(tail_fdw_, f_final);
  tail_pw_ = params_.add("ivg.pw.w", make_tensor({cfg_.instance_dim, c_in}));
  lecun_normal(tail_pw_, c_in);

  det_w_ = params_.add("det.w", make_tensor({cfg_.n_classes, cfg_.instance_dim}));
  det_b_ = params_.add("det.b", make_tensor({cfg_.n_classes}, 0.0));
  std::normal_distribution<double> det_dist(0.0, 0.05);
  for (double& v : det_w_->data) v = det_dist(rng);
}

TensorPtr FuseNet::module_forward(int module_index, const TensorPtr& x, NormMode mode) {
  if (module_index < 0 || module_index >= static_cast<int>(modules_.size()))
    throw std::invalid_argument("fusenet: module index out of range");
  Module& mod = modules_[static_cast<size_t>(module_index)];
  const int c_expected = mod.pw->dim(1);
  const int c_got = x->rank() == 4 ? x->dim(1) : x->dim(0);
  if (x->rank() < 3 || c_got != c_expected)
    throw std::invalid_argument("fusenet: module " + std::to_string(module_index + 1) +
                                " expects " + std::to_string(c_expected) +
                                " input channels, got " + shape_str(x->shape));

  auto stem = batchnorm_relu(pointwise_conv(x, mod.pw), mod.bn0.gamma, mod.bn0.beta,
                             mod.bn0.state, mode);
  std::vector<TensorPtr> stage_outputs{stem};
  TensorPtr prev = stem;
  for (auto& blk : mod.blocks) {
    auto h = batchnorm_relu(
        axis_depthwise_conv(prev, blk.fdw, ConvAxis::Frequency, PaddingMode::Same),
        blk.bn1.gamma, blk.bn1.beta, blk.bn1.state, mode);
    auto bout = batchnorm_relu(
        axis_depthwise_conv(h, blk.tdw, ConvAxis::Time, PaddingMode::Same), blk.bn2.gamma,
        blk.bn2.beta, blk.bn2.state, mode);
    stage_outputs.push_back(bout);
    prev = bout;
  }
  auto sum = add_n(stage_outputs);
  return mod.pool ? maxpool2(sum) : sum;
}

TensorPtr FuseNet::generator_forward(const TensorPtr& x, NormMode mode) {
  const bool batched = x->rank() == 4;
  if (x->rank() != 3 && !batched)
    throw std::invalid_argument("fusenet: expected (1,F,T) or (B,1,F,T), got " +
                                shape_str(x->shape));
  const int cdim = batched ? x->dim(1) : x->dim(0);
  const int fdim = batched ? x->dim(2) : x->dim(1);
  const int tdim = batched ? x->dim(3) : x->dim(2);
  if (cdim != 1 || fdim != cfg_.in_freq)
    throw std::invalid_argument("fusenet: expected frequency extent " +
                                std::to_string(cfg_.in_freq) + ", got " + shape_str(x->shape));
  if (tdim < cfg_.min_frames())
    throw std::invalid_argument("fusenet: need at least " + std::to_string(cfg_.min_frames()) +
                                " frames, got " + std::to_string(tdim));

  TensorPtr h = x;
  for (int i = 0; i < static_cast<int>(modules_.size()); ++i) h = module_forward(i, h, mode);
  h = axis_depthwise_conv(h, tail_fdw_, ConvAxis::Frequency, PaddingMode::Valid);
  h = pointwise_conv(h, tail_pw_);
  return h;
}

TensorPtr FuseNet::bag_forward(const TensorPtr& x, NormMode mode) {
  if (x->rank() != 3)
    throw std::invalid_argument("fusenet: bag_forward expects a rank-3 (1,F,T) clip");
  auto g = generator_forward(x, mode);  // (d, 1, N)
  const int d = g->dim(0), n = g->dim(2);
  return transpose2d(reshape(g, {d, n}));
}

BagOfInstances FuseNet::make_bag(const TensorPtr& x, NormMode mode, std::string clip_id) {
  return {bag_forward(x, mode), std::move(clip_id)};
}

std::vector<TensorPtr> FuseNet::bags_forward(const TensorPtr& x, NormMode mode) {
  if (x->rank() != 4)
    throw std::invalid_argument("fusenet: bags_forward expects a rank-4 (B,1,F,T) batch");
  auto g = generator_forward(x, mode);  // (B, d, 1, N)
  const int batch = g->dim(0), d = g->dim(1), n = g->dim(3);
  std::vector<TensorPtr> bags;
  bags.reserve(static_cast<size_t>(batch));
  for (int b = 0; b < batch; ++b)
    bags.push_back(transpose2d(reshape(slice_batch(g, b), {d, n})));
  return bags;
}

TensorPtr FuseNet::detector_logits(const TensorPtr& bag) const {
  if (bag->rank() != 2 || bag->dim(1) != cfg_.instance_dim)
    throw std::invalid_argument("fusenet: detector expects (N," +
                                std::to_string(cfg_.instance_dim) + "), got " +
                                shape_str(bag->shape));
  return linear_rows(bag, det_w_, det_b_);
}

ParamReport model_param_report(const FuseNet& model) {
  ParamReport report;
  const ParamSet& ps = model.params();
  for (const auto& name : ps.names()) {
    const TensorPtr t = ps.find(name);
    std::string stage;
    if (name.rfind("fm", 0) == 0) {
      stage = "feature map extractor / " + name.substr(0, name.find('.'));
    } else if (name.rfind("ivg", 0) == 0) {
      stage = "instance vector generator";
    } else {
      stage = "detector";
    }
    report.rows.push_back({stage, name, t->shape, t->size()});
    report.total += t->size();
  }
  return report;
}

}  // namespace milscene
