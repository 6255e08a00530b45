#include "sdfatlas/neural_field.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "sdfatlas/binary_io.hpp"
#include "sdfatlas/errors.hpp"

namespace sdfatlas {

namespace {

// Numerically stable softplus with sharpness k; writes sp(z) over z and the
// derivative sigma(k z) into d.
void softplus_inplace(MatX& z, MatX& d, double k) {
  const Eigen::Index n = z.size();
  double* zp = z.data();
  double* dp = d.data();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = k * zp[i];
    if (t > 30.0) {
      dp[i] = 1.0;
    } else if (t < -30.0) {
      const double e = std::exp(t);
      zp[i] = e / k;
      dp[i] = e;
    } else {
      const double e = std::exp(t);
      zp[i] = std::log1p(e) / k;
      dp[i] = e / (1.0 + e);
    }
  }
}

void softmax_columns(MatX& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    auto col = m.col(c);
    const double mx = col.maxCoeff();
    col = (col.array() - mx).exp();
    col /= col.sum();
  }
}

}  // namespace

void encode(const Vec3& q, const EncodingConfig& cfg, double* out, double* d1, double* d2) {
  int idx = 0;
  double freq = M_PI;
  for (int l = 0; l < cfg.num_frequencies; ++l) {
    for (int a = 0; a < 3; ++a) {
      const double c = std::cos(freq * q[a]);
      out[idx] = c;
      if (d1) d1[idx] = -freq * std::sin(freq * q[a]);
      if (d2) d2[idx] = -freq * freq * c;
      ++idx;
    }
    for (int a = 0; a < 3; ++a) {
      const double s = std::sin(freq * q[a]);
      out[idx] = s;
      if (d1) d1[idx] = freq * std::cos(freq * q[a]);
      if (d2) d2[idx] = -freq * freq * s;
      ++idx;
    }
    freq *= 2.0;
  }
  if (cfg.include_raw) {
    for (int a = 0; a < 3; ++a) {
      out[idx] = q[a];
      if (d1) d1[idx] = 1.0;
      if (d2) d2[idx] = 0.0;
      ++idx;
    }
  }
}

void MlpConfig::validate() const {
  if (input_dim < 1) throw ConfigError("mlp: input_dim must be positive");
  if (hidden < 1 || semantic_hidden < 1) throw ConfigError("mlp: hidden sizes must be positive");
  if (num_classes < 0) throw ConfigError("mlp: num_classes must be >= 0");
  if (!(sharpness > 0)) throw ConfigError("mlp: sharpness must be positive");
}

void Mlp::compute_offsets() {
  const std::size_t h = cfg_.hidden, d = cfg_.input_dim, s = cfg_.semantic_hidden,
                    c = cfg_.num_classes;
  std::size_t off = 0;
  o_w1_ = off; off += h * d;
  o_b1_ = off; off += h;
  o_w2_ = off; off += h * h;
  o_b2_ = off; off += h;
  o_w3_ = off; off += h;
  o_b3_ = off; off += 1;
  if (c > 0) {
    o_w4_ = off; off += s * h;
    o_b4_ = off; off += s;
    o_w5_ = off; off += c * s;
    o_b5_ = off; off += c;
  }
  params_.assign(off, 0.0);
}

Mlp::Mlp(const MlpConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  compute_offsets();
  Rng rng(derive_seed(seed, 0x911cu));
  auto fill = [&](std::size_t off, std::size_t count, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) params_[off + i] = rng.uniform(-bound, bound);
  };
  const std::size_t h = cfg_.hidden, d = cfg_.input_dim, s = cfg_.semantic_hidden,
                    c = cfg_.num_classes;
  fill(o_w1_, h * d, static_cast<int>(d));
  fill(o_w2_, h * h, static_cast<int>(h));
  fill(o_w3_, h, static_cast<int>(h));
  params_[o_b3_] = 0.5;  // empty space starts positive
  if (c > 0) {
    fill(o_w4_, s * h, static_cast<int>(h));
    fill(o_w5_, c * s, static_cast<int>(s));
  }
}

void Mlp::save(std::ostream& os) const {
  auto write_layer = [&os](const double* data, uint32_t rows, uint32_t cols) {
    write_pod<uint32_t>(os, rows);
    write_pod<uint32_t>(os, cols);
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    for (std::size_t i = 0; i < n; ++i) write_pod<float>(os, static_cast<float>(data[i]));
  };
  const uint32_t h = cfg_.hidden, d = cfg_.input_dim, s = cfg_.semantic_hidden,
                 c = cfg_.num_classes;
  write_pod<uint32_t>(os, c > 0 ? 5u : 3u);
  write_layer(params_.data() + o_w1_, h, d + 1);  // bias appended conceptually
  write_layer(params_.data() + o_w2_, h, h + 1);
  write_layer(params_.data() + o_w3_, 1, h + 1);
  if (c > 0) {
    write_layer(params_.data() + o_w4_, s, h + 1);
    write_layer(params_.data() + o_w5_, c, s + 1);
  }
}

Mlp Mlp::load(std::istream& is, const MlpConfig& cfg) {
  Mlp mlp;
  mlp.cfg_ = cfg;
  cfg.validate();
  mlp.compute_offsets();
  const uint32_t layers = read_pod<uint32_t>(is);
  if (layers != (cfg.num_classes > 0 ? 5u : 3u)) throw IoError("mlp: layer count mismatch");
  auto read_layer = [&is](double* data, uint32_t rows, uint32_t cols) {
    const uint32_t r = read_pod<uint32_t>(is);
    const uint32_t c = read_pod<uint32_t>(is);
    if (r != rows || c != cols) throw IoError("mlp: layer shape mismatch");
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(read_pod<float>(is));
  };
  const uint32_t h = cfg.hidden, d = cfg.input_dim, s = cfg.semantic_hidden,
                 c = cfg.num_classes;
  read_layer(mlp.params_.data() + mlp.o_w1_, h, d + 1);
  read_layer(mlp.params_.data() + mlp.o_w2_, h, h + 1);
  read_layer(mlp.params_.data() + mlp.o_w3_, 1, h + 1);
  if (c > 0) {
    read_layer(mlp.params_.data() + mlp.o_w4_, s, h + 1);
    read_layer(mlp.params_.data() + mlp.o_w5_, c, s + 1);
  }
  return mlp;
}

NeuralVolume::NeuralVolume(FeatureOctree octree, EncodingConfig enc, int num_classes,
                           uint32_t id, const Pose& origin, uint64_t seed, double sharpness)
    : octree_(std::move(octree)), enc_(enc), origin_(origin), id_(id) {
  MlpConfig mc;
  mc.input_dim = octree_.feature_dim() + enc_.dim();
  mc.num_classes = num_classes;
  mc.sharpness = sharpness;
  mlp_ = Mlp(mc, derive_seed(seed, id));
  log_xi_ = std::log(1.0 / octree_.config().leaf_resolution);
}

FeatureOctree& NeuralVolume::octree_mut() {
  require_mutable();
  return octree_;
}

double NeuralVolume::xi() const { return std::exp(log_xi_); }

void NeuralVolume::set_log_xi(double v) {
  require_mutable();
  log_xi_ = v;
}

void NeuralVolume::require_mutable() const {
  if (frozen_) throw FrozenVolumeError("volume " + std::to_string(id_) + " is frozen");
}

Vec3 NeuralVolume::normalize_point(const Vec3& p) const {
  const auto& b = octree_.config().bounds;
  const Vec3 c = 0.5 * (b.min() + b.max());
  const Vec3 half = 0.5 * (b.max() - b.min());
  return (p - c).cwiseQuotient(half);
}

Vec3 NeuralVolume::normalize_scale() const {
  const auto& b = octree_.config().bounds;
  return Vec3::Constant(2.0).cwiseQuotient(b.max() - b.min());
}

FieldOutput NeuralVolume::query(const Vec3& p_local, bool need_gradient,
                                bool need_semantics) const {
  FieldBatch fb(*this);
  fb.forward(std::span<const Vec3>(&p_local, 1), need_gradient, need_semantics);
  FieldOutput out;
  out.ok = fb.ok(0);
  out.failed_level = fb.failed_level(0);
  if (!out.ok) return out;
  out.sdf = fb.sdf(0);
  if (need_gradient) out.sdf_gradient = fb.sdf_gradient(0);
  if (need_semantics) out.class_probs = fb.class_probs(0);
  return out;
}

std::size_t NeuralVolume::parameter_count() const {
  return octree_.parameter_count() + mlp_.parameter_count() + 1;
}

double NeuralVolume::parameter(std::size_t i) const {
  const std::size_t f = octree_.parameter_count();
  if (i < f) return octree_.features()[i];
  i -= f;
  if (i < mlp_.parameter_count()) return mlp_.parameters()[i];
  return log_xi_;
}

void NeuralVolume::set_parameter(std::size_t i, double v) {
  require_mutable();
  const std::size_t f = octree_.parameter_count();
  if (i < f) {
    octree_.features()[i] = v;
    return;
  }
  i -= f;
  if (i < mlp_.parameter_count()) {
    mlp_.parameters()[i] = v;
    return;
  }
  log_xi_ = v;
}

std::span<double> NeuralVolume::feature_params() {
  require_mutable();
  return octree_.features();
}

std::span<double> NeuralVolume::mlp_params() {
  require_mutable();
  return mlp_.parameters();
}

void NeuralVolume::save(std::ostream& os) const {
  write_magic(os, "NFVL");
  write_pod<uint32_t>(os, 1);
  write_pod<uint32_t>(os, id_);
  const Eigen::Quaterniond q = origin_.quaternion().normalized();
  write_pod<double>(os, q.w());
  write_pod<double>(os, q.x());
  write_pod<double>(os, q.y());
  write_pod<double>(os, q.z());
  for (int a = 0; a < 3; ++a) write_pod<double>(os, origin_.translation()[a]);
  write_pod<uint32_t>(os, static_cast<uint32_t>(mlp_.config().num_classes));
  write_pod<uint8_t>(os, frozen_ ? 1 : 0);
  write_pod<double>(os, log_xi_);
  write_pod<uint32_t>(os, static_cast<uint32_t>(enc_.num_frequencies));
  write_pod<uint8_t>(os, enc_.include_raw ? 1 : 0);
  write_pod<double>(os, mlp_.config().sharpness);
  octree_.save(os);
  mlp_.save(os);
}

NeuralVolume NeuralVolume::load(std::istream& is) {
  expect_magic(is, "NFVL");
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1) throw IoError("volume file: unsupported version");
  NeuralVolume vol;
  vol.id_ = read_pod<uint32_t>(is);
  Eigen::Quaterniond q;
  q.w() = read_pod<double>(is);
  q.x() = read_pod<double>(is);
  q.y() = read_pod<double>(is);
  q.z() = read_pod<double>(is);
  Vec3 t;
  for (int a = 0; a < 3; ++a) t[a] = read_pod<double>(is);
  vol.origin_ = Pose::from_quaternion(q, t);
  const uint32_t classes = read_pod<uint32_t>(is);
  const bool frozen = read_pod<uint8_t>(is) != 0;
  vol.log_xi_ = read_pod<double>(is);
  vol.enc_.num_frequencies = static_cast<int>(read_pod<uint32_t>(is));
  vol.enc_.include_raw = read_pod<uint8_t>(is) != 0;
  const double sharpness = read_pod<double>(is);
  vol.octree_ = FeatureOctree::load(is);
  MlpConfig mc;
  mc.input_dim = vol.octree_.feature_dim() + vol.enc_.dim();
  mc.num_classes = static_cast<int>(classes);
  mc.sharpness = sharpness;
  vol.mlp_ = Mlp::load(is, mc);
  vol.frozen_ = frozen;
  return vol;
}

void NeuralVolume::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write volume file: " + path);
  save(os);
}

NeuralVolume NeuralVolume::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open volume file: " + path);
  return load(is);
}

void FieldBatch::forward(std::span<const Vec3> points, const FieldForwardOpts& opts) {
  const NeuralVolume& vol = *vol_;
  const FeatureOctree& tree = vol.octree();
  const Mlp& mlp = vol.mlp();
  const MlpConfig& mc = mlp.config();
  if (opts.semantics && mc.num_classes == 0)
    throw ConfigError("semantic query on a geometry-only volume");

  const int n_feat = tree.feature_dim();
  const int e_dim = vol.encoding().dim();
  const int d_in = mc.input_dim;
  const int h = mc.hidden;
  const int b = static_cast<int>(points.size());
  count_ = b;
  has_gradient_ = opts.gradient;
  has_semantics_ = opts.semantics;
  has_hessian_ = opts.hessian_ctx;
  has_jac_ctx_ = opts.gradient || opts.point_grad_ctx || opts.hessian_ctx;

  ctx_.resize(b);
  ok_.resize(b);
  failed_level_.resize(b);
  x_.resize(d_in, b);
  if (has_jac_ctx_) {
    ed1_.resize(e_dim, b);
    ed2_.resize(e_dim, b);
  }

  const Vec3 scale = vol.normalize_scale();
  for (int i = 0; i < b; ++i) {
    const Vec3& p = points[i];
    ctx_[i] = tree.interpolate(p, has_jac_ctx_, has_hessian_);
    ok_[i] = ctx_[i].ok ? 1 : 0;
    failed_level_[i] = static_cast<int8_t>(ctx_[i].failed_level);
    if (ctx_[i].ok)
      x_.col(i).head(n_feat) = ctx_[i].value;
    else
      x_.col(i).head(n_feat).setZero();
    const Vec3 q = vol.normalize_point(p);
    double* enc_out = x_.col(i).data() + n_feat;
    if (has_jac_ctx_) {
      encode(q, vol.encoding(), enc_out, ed1_.col(i).data(), ed2_.col(i).data());
      for (int e = 0; e < e_dim; ++e) {
        const double sc = scale[e % 3];
        ed1_(e, i) *= sc;
        ed2_(e, i) *= sc * sc;
      }
    } else {
      encode(q, vol.encoding(), enc_out);
    }
  }

  const double k = mc.sharpness;
  a1_.resize(h, b);
  d1_.resize(h, b);
  a1_.noalias() = mlp.w1() * x_;
  a1_.colwise() += mlp.b1();
  softplus_inplace(a1_, d1_, k);

  a2_.resize(h, b);
  d2_.resize(h, b);
  a2_.noalias() = mlp.w2() * a1_;
  a2_.colwise() += mlp.b2();
  softplus_inplace(a2_, d2_, k);

  s_.resize(b);
  s_.noalias() = a2_.transpose() * mlp.w3();
  s_.array() += mlp.b3();

  if (opts.gradient) {
    q2_ = d2_.array().colwise() * mlp.w3().array();
    t1_.resize(h, b);
    t1_.noalias() = mlp.w2().transpose() * q2_;
    q1_ = d1_.cwiseProduct(t1_);
    gx_.resize(d_in, b);
    gx_.noalias() = mlp.w1().transpose() * q1_;

    gp_.resize(3, b);
    for (int i = 0; i < b; ++i) {
      if (!ok_[i]) {
        gp_.col(i).setZero();
        continue;
      }
      Vec3 g = ctx_[i].jacobian.transpose() * gx_.col(i).head(n_feat);
      for (int e = 0; e < e_dim; ++e) g[e % 3] += gx_(n_feat + e, i) * ed1_(e, i);
      gp_.col(i) = g;
    }
  }

  if (opts.semantics) {
    const int s_dim = mc.semantic_hidden;
    a4_.resize(s_dim, b);
    d4_.resize(s_dim, b);
    a4_.noalias() = mlp.w4() * a2_;
    a4_.colwise() += mlp.b4();
    softplus_inplace(a4_, d4_, k);
    probs_.resize(mc.num_classes, b);
    probs_.noalias() = mlp.w5() * a4_;
    probs_.colwise() += mlp.b5();
    softmax_columns(probs_);
  }
}

void FieldBatch::backward(const double* up_s, const double* up_g, const double* up_logits,
                          PGradMode pgrad_mode, const FieldGradSinks& sinks) {
  const NeuralVolume& vol = *vol_;
  const Mlp& mlp = vol.mlp();
  const MlpConfig& mc = mlp.config();
  const FeatureOctree& tree = vol.octree();
  const int n_feat = tree.feature_dim();
  const int e_dim = vol.encoding().dim();
  const int d_in = mc.input_dim;
  const int h = mc.hidden;
  const int b = count_;
  const double k = mc.sharpness;

  if (sinks.want_params() && vol.frozen())
    throw FrozenVolumeError("parameter gradients requested on a frozen volume");
  if (up_g && !has_gradient_)
    throw std::logic_error("field backward: gradient upstream without gradient forward");
  if (up_logits && !has_semantics_)
    throw std::logic_error("field backward: semantic upstream without semantic forward");
  const bool want_p = pgrad_mode != PGradMode::none;
  if (want_p && !has_jac_ctx_)
    throw std::logic_error("field backward: p-gradients need jacobian context at forward");

  // Zero out upstream columns of failed samples.
  VecX us = VecX::Zero(b);
  if (up_s)
    for (int i = 0; i < b; ++i) us(i) = ok_[i] ? up_s[i] : 0.0;
  MatX ug;
  if (up_g) {
    ug = Eigen::Map<const MatX>(up_g, 3, b);
    for (int i = 0; i < b; ++i)
      if (!ok_[i]) ug.col(i).setZero();
  }
  MatX ul;
  if (up_logits) {
    ul = Eigen::Map<const MatX>(up_logits, mc.num_classes, b);
    for (int i = 0; i < b; ++i)
      if (!ok_[i]) ul.col(i).setZero();
  }

  const bool path_b = up_g != nullptr;

  // v = B * u per sample: feature rows via the octree jacobian, encoding rows
  // are diagonal in the entry's own axis.
  if (path_b) {
    v_.resize(d_in, b);
    for (int i = 0; i < b; ++i) {
      const Vec3 u = ug.col(i);
      if (ok_[i])
        v_.col(i).head(n_feat) = ctx_[i].jacobian * u;
      else
        v_.col(i).head(n_feat).setZero();
      for (int e = 0; e < e_dim; ++e) v_(n_feat + e, i) = ed1_(e, i) * u[e % 3];
    }
    r1_.resize(h, b);
    r1_.noalias() = mlp.w1() * v_;
    c1_ = r1_.cwiseProduct(d1_);
    r2_.resize(h, b);
    r2_.noalias() = mlp.w2() * c1_;
  }

  // Value + semantic upstream chain.
  a2hat_.resize(h, b);
  a2hat_.noalias() = mlp.w3() * us.transpose();

  MatX z4hat, z5hat;
  if (up_logits) {
    z5hat = ul;
    MatX a4hat = mlp.w5().transpose() * z5hat;
    z4hat = a4hat.cwiseProduct(d4_);
    a2hat_.noalias() += mlp.w4().transpose() * z4hat;
  }

  z2a_ = a2hat_.cwiseProduct(d2_);
  if (path_b) {
    // softplus'' = k * sigma * (1 - sigma)
    MatX sp2 = (k * d2_.array() * (1.0 - d2_.array())).matrix();
    z2b_ = (r2_.array().colwise() * mlp.w3().array()).matrix().cwiseProduct(sp2);
  }

  a1hat_.resize(h, b);
  a1hat_.noalias() = mlp.w2().transpose() * z2a_;
  z1a_ = a1hat_.cwiseProduct(d1_);
  if (path_b) {
    MatX a1hat_b = mlp.w2().transpose() * z2b_;
    MatX sp1 = (k * d1_.array() * (1.0 - d1_.array())).matrix();
    z1b_ = a1hat_b.cwiseProduct(d1_) + r1_.cwiseProduct(t1_).cwiseProduct(sp1);
    z1tot_ = z1a_ + z1b_;
  }
  const MatX& z1_total = path_b ? z1tot_ : z1a_;

  if (sinks.want_params()) {
    VecX& g = *sinks.mlp;
    if (g.size() != static_cast<Eigen::Index>(mlp.parameter_count()))
      throw std::logic_error("mlp gradient buffer size mismatch");
    auto gw1 = Eigen::Map<MatX>(g.data() + mlp.offset_w1(), h, d_in);
    auto gb1 = Eigen::Map<VecX>(g.data() + mlp.offset_b1(), h);
    auto gw2 = Eigen::Map<MatX>(g.data() + mlp.offset_w2(), h, h);
    auto gb2 = Eigen::Map<VecX>(g.data() + mlp.offset_b2(), h);
    auto gw3 = Eigen::Map<VecX>(g.data() + mlp.offset_w3(), h);

    if (path_b) {
      MatX z2_total = z2a_ + z2b_;
      gw2.noalias() += z2_total * a1_.transpose();
      gb2 += z2_total.rowwise().sum();
      gw2.noalias() += q2_ * c1_.transpose();
      gw3 += r2_.cwiseProduct(d2_).rowwise().sum();
      gw1.noalias() += q1_ * v_.transpose();
    } else {
      gw2.noalias() += z2a_ * a1_.transpose();
      gb2 += z2a_.rowwise().sum();
    }
    gw3.noalias() += a2_ * us;
    g[mlp.offset_b3()] += us.sum();
    gw1.noalias() += z1_total * x_.transpose();
    gb1 += z1_total.rowwise().sum();
    if (up_logits) {
      const int s_dim = mc.semantic_hidden;
      auto gw4 = Eigen::Map<MatX>(g.data() + mlp.offset_w4(), s_dim, h);
      auto gb4 = Eigen::Map<VecX>(g.data() + mlp.offset_b4(), s_dim);
      auto gw5 = Eigen::Map<MatX>(g.data() + mlp.offset_w5(), mc.num_classes, s_dim);
      auto gb5 = Eigen::Map<VecX>(g.data() + mlp.offset_b5(), mc.num_classes);
      gw5.noalias() += z5hat * a4_.transpose();
      gb5 += z5hat.rowwise().sum();
      gw4.noalias() += z4hat * a2_.transpose();
      gb4 += z4hat.rowwise().sum();
    }
  }

  if (want_p || sinks.features) {
    xhata_.resize(d_in, b);
    xhata_.noalias() = mlp.w1().transpose() * z1a_;
    if (path_b) {
      xhat_.resize(d_in, b);
      xhat_.noalias() = mlp.w1().transpose() * z1b_;
      xhat_ += xhata_;
    }
    const MatX& x_total = path_b ? xhat_ : xhata_;

    if (sinks.features) {
      FeatureGradSink& sink = *sinks.features;
      FeatVec up_val(n_feat);
      FeatMat3 up_jac(n_feat, 3);
      for (int i = 0; i < b; ++i) {
        if (!ok_[i]) continue;
        up_val = x_total.col(i).head(n_feat);
        if (path_b) {
          up_jac = gx_.col(i).head(n_feat) * ug.col(i).transpose();
          tree.backward_interpolate(ctx_[i], up_val, &up_jac, sink, nullptr);
        } else {
          tree.backward_interpolate(ctx_[i], up_val, nullptr, sink, nullptr);
        }
      }
    }

    if (want_p) {
      pgrad_.resize(3, b);
      pgrad_.setZero();
      const bool full = pgrad_mode == PGradMode::full;
      if (full && path_b && !has_hessian_)
        throw std::logic_error("full p-gradient requires hessian context at forward");
      const MatX& xh = full ? x_total : xhata_;
      for (int i = 0; i < b; ++i) {
        if (!ok_[i]) continue;
        Vec3 g = ctx_[i].jacobian.transpose() * xh.col(i).head(n_feat);
        for (int e = 0; e < e_dim; ++e) g[e % 3] += xh(n_feat + e, i) * ed1_(e, i);
        if (full && path_b) {
          const Vec3 u = ug.col(i);
          for (int d = 0; d < n_feat; ++d) {
            const double hxy = ctx_[i].hessian_upper(d, 0);
            const double hxz = ctx_[i].hessian_upper(d, 1);
            const double hyz = ctx_[i].hessian_upper(d, 2);
            const double gxd = gx_(d, i);
            g.x() += gxd * (hxy * u.y() + hxz * u.z());
            g.y() += gxd * (hxy * u.x() + hyz * u.z());
            g.z() += gxd * (hxz * u.x() + hyz * u.y());
          }
          for (int e = 0; e < e_dim; ++e) {
            const int ax = e % 3;
            g[ax] += gx_(n_feat + e, i) * u[ax] * ed2_(e, i);
          }
        }
        pgrad_.col(i) = g;
      }
    }
  }
}

QueryBackwardResult query_backward(const NeuralVolume& vol, const Vec3& p_local, double up_sdf,
                                   const Vec3& up_gradient, const VecX& up_logits,
                                   PGradMode pmode) {
  const bool need_grad = up_gradient.squaredNorm() > 0;
  const bool need_sem = up_logits.size() > 0;
  FieldBatch fb(vol);
  fb.forward(std::span<const Vec3>(&p_local, 1), true, need_sem, true);

  VecX mlp_grad = VecX::Zero(vol.mlp().parameter_count());
  FeatureGradSink sink(vol.octree().feature_dim());
  FieldGradSinks sinks;
  sinks.mlp = &mlp_grad;
  sinks.features = &sink;

  fb.backward(&up_sdf, need_grad ? up_gradient.data() : nullptr,
              need_sem ? up_logits.data() : nullptr, pmode, sinks);

  QueryBackwardResult out;
  out.param_grad = VecX::Zero(vol.parameter_count());
  std::span<double> feat_span(out.param_grad.data(), vol.octree().parameter_count());
  sink.scatter_into(feat_span);
  out.param_grad.segment(vol.mlp_offset(), vol.mlp().parameter_count()) = mlp_grad;
  out.p_grad = fb.p_grad(0);
  return out;
}

}  // namespace sdfatlas
