#include "mfsig/solver.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>

#include "mfsig/errors.hpp"

namespace mfsig::solver {

void FbsdeProblem::validate() const {
  if (dim_x == 0 || dim_y == 0 || q == 0 || embed_dim == 0)
    throw ConfigError(name + ": dimensions must be positive");
  if (!(horizon > 0)) throw ConfigError(name + ": horizon must be positive");
  if (!mu0 || !drift || !vol || !vol0 || !driver || !terminal)
    throw ConfigError(name + ": missing coefficient callable");
  for (std::size_t i = 0; i < 5; ++i)
    if (!m_zero[i] && !exact_m[i])
      throw ConfigError(name + ": m" + std::to_string(i + 1) +
                        " declared non-zero but has no exact evaluator");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a,
                          std::uint64_t b) {
  path::Rng r = path::Rng::stream(seed, path::StreamKind::Test, tag, a, b);
  return r.next_u64();
}

FeatureTable compute_features(const path::DriverBlock& drivers, const path::TimeGrid& grid,
                              const SigConfig& cfg) {
  FeatureTable table;
  table.n_nodes = grid.n_steps + 1;
  table.n2 = drivers.n2;
  table.width = cfg.width(drivers.q);
  table.data.assign(table.n_nodes * table.n2 * table.width, 0.0);

  std::vector<double> w(drivers.q, 0.0);
  for (std::size_t i2 = 0; i2 < drivers.n2; ++i2) {
    sig::SigStream stream(drivers.q, cfg.depth, /*augmented=*/true);
    std::fill(w.begin(), w.end(), 0.0);
    stream.start(0.0, w);
    auto emit = [&](std::size_t node) {
      double* dst = table.data.data() + (node * table.n2 + i2) * table.width;
      if (cfg.feature == embed::FeatureKind::Signature) {
        sig::flatten_signature(stream.current(), {dst, table.width});
      } else {
        sig::flatten_log_signature(sig::log_signature(stream.current()), {dst, table.width});
      }
    };
    emit(0);
    for (std::size_t f = 0; f < grid.fine_steps(); ++f) {
      auto inc = drivers.common_fine_inc(i2, f);
      for (std::size_t j = 0; j < drivers.q; ++j) w[j] += inc[j];
      stream.extend(grid.fine_t(f + 1), w);
      if ((f + 1) % grid.fine_factor == 0) emit((f + 1) / grid.fine_factor);
    }
  }
  return table;
}

DecouplingFields DecouplingFields::make(const FbsdeProblem& p, const SigConfig& sig,
                                        const std::vector<std::size_t>& u_hidden,
                                        const std::vector<std::size_t>& field_hidden,
                                        nn::Act u_act, nn::Act field_act, path::Rng& rng) {
  DecouplingFields f;
  const std::size_t F = sig.width(p.q);
  f.u = nn::NetParams::make_mlp(p.dim_x, u_hidden, p.dim_y, u_act, rng);
  f.v = nn::NetParams::make_mlp(1 + p.dim_x + F, field_hidden, p.dim_y * p.q, field_act, rng);
  f.v0 = nn::NetParams::make_mlp(1 + p.dim_x + F, field_hidden, p.dim_y * p.q, field_act, rng);
  return f;
}

path::CondEnsemble SimOutput::theta_ensemble(const FbsdeProblem& p) const {
  const std::size_t rec = p.record_dim();
  auto ens = path::CondEnsemble::allocate(n_nodes - 1, n2, n1, rec);
  for (std::size_t ti = 0; ti + 1 < n_nodes; ++ti) {
    const nn::Tensor& x = xs[ti];
    const nn::Tensor& y = ys[ti];
    const nn::Tensor& z = zs[ti];
    for (std::size_t i2 = 0; i2 < n2; ++i2)
      for (std::size_t i1 = 0; i1 < n1; ++i1) {
        const std::size_t r = i2 * n1 + i1;
        double* dst = ens.particles(ti, i2).data() + i1 * rec;
        for (std::size_t k = 0; k < p.dim_x; ++k) dst[k] = x.data[r * p.dim_x + k];
        for (std::size_t k = 0; k < p.dim_y; ++k) dst[p.dim_x + k] = y.data[r * p.dim_y + k];
        for (std::size_t k = 0; k < p.dim_y * p.q; ++k)
          dst[p.dim_x + p.dim_y + k] = z.data[r * p.dim_y * p.q + k];
      }
  }
  return ens;
}

path::CondEnsemble SimOutput::terminal_ensemble(const FbsdeProblem& p) const {
  auto ens = path::CondEnsemble::allocate(1, n2, n1, p.dim_x);
  const nn::Tensor& x = xs[n_nodes - 1];
  for (std::size_t i2 = 0; i2 < n2; ++i2)
    for (std::size_t i1 = 0; i1 < n1; ++i1) {
      double* dst = ens.particles(0, i2).data() + i1 * p.dim_x;
      for (std::size_t k = 0; k < p.dim_x; ++k) dst[k] = x.data[(i2 * n1 + i1) * p.dim_x + k];
    }
  return ens;
}

namespace {

// Expands per-n2 feature rows to the full batch (row = i2*n1 + i1).
nn::Tensor batch_features(const FeatureTable& table, std::size_t node, std::size_t n1) {
  nn::Tensor t = nn::Tensor::zeros({table.n2 * n1, table.width});
  for (std::size_t i2 = 0; i2 < table.n2; ++i2) {
    auto src = table.row(node, i2);
    for (std::size_t i1 = 0; i1 < n1; ++i1)
      std::copy(src.begin(), src.end(), t.data.begin() + (i2 * n1 + i1) * table.width);
  }
  return t;
}

void check_finite_state(const nn::Tensor& v, const char* what, int stage, std::size_t node,
                        std::size_t n1) {
  for (std::size_t k = 0; k < v.data.size(); ++k) {
    if (!std::isfinite(v.data[k])) {
      const std::size_t row = k / v.cols();
      throw SimulationError(std::string(what) + " became non-finite", stage, node, row % n1,
                            row / n1);
    }
  }
}

}  // namespace

namespace {

SimOutput simulate_core(const FbsdeProblem& problem, const SimFns& fns,
                        const path::DriverBlock& drivers, const path::TimeGrid& grid,
                        const SigConfig& sig, bool keep_tape, int stage) {
  problem.validate();
  const std::size_t n1 = drivers.n1, n2 = drivers.n2, B = n1 * n2;
  const std::size_t dx = problem.dim_x, dy = problem.dim_y, q = problem.q;
  if (drivers.q != q || drivers.dim_x != dx)
    throw ConfigError("simulate: driver block dims do not match problem");

  SimOutput out;
  out.n1 = n1;
  out.n2 = n2;
  out.n_nodes = grid.n_steps + 1;
  out.features = compute_features(drivers, grid, sig);
  const FeatureTable& features = out.features;
  nn::Tape& tape = out.tape;

  // initial state
  nn::Tensor x0 = nn::Tensor::zeros({B, dx});
  for (std::size_t i2 = 0; i2 < n2; ++i2)
    for (std::size_t i1 = 0; i1 < n1; ++i1) {
      auto src = drivers.initial_state(i2, i1);
      std::copy(src.begin(), src.end(), x0.data.begin() + (i2 * n1 + i1) * dx);
    }
  nn::Value x = tape.constant(std::move(x0));
  nn::Value y = fns.u(tape, x);

  auto predict_m = [&](std::size_t idx, double t, nn::Value xv, nn::Value feat) {
    nn::Value v = fns.m(tape, idx, t, xv, feat);
    if (!v.valid() && !problem.m_zero[idx])
      throw ConfigError("simulate: m" + std::to_string(idx + 1) +
                        " is non-zero but no embedding evaluator was provided");
    return v;
  };

  nn::Value z, z0;
  for (std::size_t i = 0; i < grid.n_steps; ++i) {
    const double t = grid.t(i);
    nn::Value feat = tape.constant(batch_features(features, i, n1));

    z = fns.v(tape, t, x, feat);
    z0 = fns.v0(tape, t, x, feat);

    CoeffContext ctx;
    ctx.t = t;
    ctx.x = x;
    ctx.y = y;
    ctx.z = z;
    ctx.z0 = z0;
    for (std::size_t mi = 0; mi < 4; ++mi) ctx.m[mi] = predict_m(mi, t, x, feat);

    nn::Value b = problem.drift(tape, ctx);
    nn::Value sg = problem.vol(tape, ctx);
    nn::Value sg0 = problem.vol0(tape, ctx);
    nn::Value h = problem.driver(tape, ctx);

    // driver increments for this node
    nn::Tensor dw = nn::Tensor::zeros({B, q});
    nn::Tensor dw0 = nn::Tensor::zeros({B, q});
    std::vector<double> coarse(q);
    for (std::size_t i2 = 0; i2 < n2; ++i2) {
      drivers.common_coarse_inc(i2, i, coarse);
      for (std::size_t i1 = 0; i1 < n1; ++i1) {
        const std::size_t r = i2 * n1 + i1;
        auto idio = drivers.idio_inc(i2, i1, i);
        for (std::size_t j = 0; j < q; ++j) {
          dw.data[r * q + j] = idio[j];
          dw0.data[r * q + j] = coarse[j];
        }
      }
    }
    nn::Value dw_v = tape.constant(std::move(dw));
    nn::Value dw0_v = tape.constant(std::move(dw0));

    out.x_nodes.push_back(x);
    out.y_nodes.push_back(y);
    out.z_nodes.push_back(z);
    out.z0_nodes.push_back(z0);

    const double dt = grid.dt();
    nn::Value x_next = nn::add(tape, x,
        nn::add(tape, nn::scale(tape, b, dt),
                nn::add(tape, nn::matvec(tape, sg, dw_v, dx, q),
                        nn::matvec(tape, sg0, dw0_v, dx, q))));
    nn::Value y_next = nn::add(tape, nn::sub(tape, y, nn::scale(tape, h, dt)),
        nn::add(tape, nn::matvec(tape, z, dw_v, dy, q),
                nn::matvec(tape, z0, dw0_v, dy, q)));

    check_finite_state(tape.value(x_next), "X", stage, i + 1, n1);
    check_finite_state(tape.value(y_next), "Y", stage, i + 1, n1);
    x = x_next;
    y = y_next;
  }

  // terminal node: evaluate fields once more for full-length curves
  {
    const double T = grid.t(grid.n_steps);
    nn::Value feat = tape.constant(batch_features(features, grid.n_steps, n1));
    z = fns.v(tape, T, x, feat);
    z0 = fns.v0(tape, T, x, feat);
    out.x_nodes.push_back(x);
    out.y_nodes.push_back(y);
    out.z_nodes.push_back(z);
    out.z0_nodes.push_back(z0);

    nn::Value m5 = predict_m(4, T, x, feat);
    nn::Value g = problem.terminal(tape, T, x, m5);
    out.mismatch_v = nn::sub(tape, g, y);
  }

  // plain copies for targets, metrics and dataset assembly
  for (std::size_t i = 0; i < out.n_nodes; ++i) {
    out.xs.push_back(tape.value(out.x_nodes[i]));
    out.ys.push_back(tape.value(out.y_nodes[i]));
    out.zs.push_back(tape.value(out.z_nodes[i]));
    out.z0s.push_back(tape.value(out.z0_nodes[i]));
  }
  out.mismatch = tape.value(out.mismatch_v);
  double acc = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dy; ++k) {
      const double v = out.mismatch.data[r * dy + k];
      sq += v * v;
    }
    acc += sq;
  }
  out.terminal_loss = acc / static_cast<double>(B);

  if (!keep_tape) {
    out.tape = nn::Tape{};  // free the recording; plain copies remain
    out.x_nodes.clear();
    out.y_nodes.clear();
    out.z_nodes.clear();
    out.z0_nodes.clear();
    out.mismatch_v = nn::Value{};
    out.bindings = SimBindings{};
  }
  return out;
}

}  // namespace

SimOutput simulate_fns(const FbsdeProblem& problem, const SimFns& fns,
                       const path::DriverBlock& drivers, const path::TimeGrid& grid,
                       const SigConfig& sig, int stage) {
  return simulate_core(problem, fns, drivers, grid, sig, /*keep_tape=*/false, stage);
}

SimOutput simulate(const FbsdeProblem& problem, const DecouplingFields& fields,
                   const EmbedSet& embeds, const path::DriverBlock& drivers,
                   const path::TimeGrid& grid, const SigConfig& sig, bool train_fields,
                   int stage) {
  const std::size_t F = sig.width(problem.q);
  if (fields.v.input_dim != 1 + problem.dim_x + F)
    throw ConfigError("simulate: v network input dim does not match d and feature length");

  // Bindings must live on the output tape; simulate_core fills out.tape, so
  // bind lazily through shared state captured by the closures.
  struct Bindings {
    bool done = false;
    nn::BoundNet u, v, v0;
    std::array<nn::BoundNet, 5> m;
  };
  auto shared = std::make_shared<Bindings>();
  auto ensure_bound = [shared, &fields, &embeds, train_fields](nn::Tape& tape) {
    if (shared->done) return;
    shared->u = nn::bind(tape, fields.u, train_fields);
    shared->v = nn::bind(tape, fields.v, train_fields);
    shared->v0 = nn::bind(tape, fields.v0, train_fields);
    for (std::size_t i = 0; i < 5; ++i)
      if (embeds.m[i].has_value()) shared->m[i] = nn::bind(tape, embeds.m[i]->net, false);
    shared->done = true;
  };

  SimFns fns;
  fns.u = [shared, ensure_bound](nn::Tape& tape, nn::Value x0) {
    ensure_bound(tape);
    return nn::forward(tape, shared->u, x0);
  };
  fns.v = [shared, ensure_bound](nn::Tape& tape, double t, nn::Value x, nn::Value feat) {
    ensure_bound(tape);
    const std::size_t B = tape.value(x).rows();
    nn::Value t_col = tape.constant(nn::Tensor::full({B, 1}, t));
    return nn::forward(tape, shared->v,
                       nn::concat_cols(tape, nn::concat_cols(tape, t_col, x), feat));
  };
  fns.v0 = [shared, ensure_bound](nn::Tape& tape, double t, nn::Value x, nn::Value feat) {
    ensure_bound(tape);
    const std::size_t B = tape.value(x).rows();
    nn::Value t_col = tape.constant(nn::Tensor::full({B, 1}, t));
    return nn::forward(tape, shared->v0,
                       nn::concat_cols(tape, nn::concat_cols(tape, t_col, x), feat));
  };
  fns.m = [shared, ensure_bound, &embeds](nn::Tape& tape, std::size_t mi, double t,
                                          nn::Value x, nn::Value feat) {
    if (!embeds.m[mi].has_value()) return nn::Value{};
    ensure_bound(tape);
    const std::size_t B = tape.value(x).rows();
    nn::Value t_col = tape.constant(nn::Tensor::full({B, 1}, t));
    nn::Value t_state = nn::concat_cols(tape, t_col, x);
    return embed_predict(tape, shared->m[mi], *embeds.m[mi], t_state, feat);
  };

  SimOutput out = simulate_core(problem, fns, drivers, grid, sig, train_fields, stage);
  if (train_fields) {
    out.bindings.u = shared->u;
    out.bindings.v = shared->v;
    out.bindings.v0 = shared->v0;
  }
  return out;
}

nn::Value bsde_loss(SimOutput& sim) {
  if (!sim.mismatch_v.valid())
    throw UsageError("bsde_loss: simulation ran without tape recording");
  return nn::mean_all(sim.tape, nn::sum_cols(sim.tape, nn::square_v(sim.tape, sim.mismatch_v)));
}

FieldAdams FieldAdams::for_fields(const DecouplingFields& f) {
  FieldAdams a;
  a.u = nn::AdamState::for_net(f.u);
  a.v = nn::AdamState::for_net(f.v);
  a.v0 = nn::AdamState::for_net(f.v0);
  return a;
}

TrainTrace train_bsde(const FbsdeProblem& problem, DecouplingFields& fields,
                      FieldAdams& adams, const EmbedSet& embeds, const path::TimeGrid& grid,
                      const SigConfig& sig, const nn::LrSchedule& schedule, long steps,
                      long regen_every, std::size_t n1, std::size_t n2, std::uint64_t seed,
                      int stage) {
  TrainTrace trace;
  if (steps == 0) return trace;
  path::DriverBlock drivers;
  double initial = -1.0;
  int high_streak = 0;
  for (long s = 0; s < steps; ++s) {
    if (s == 0 || (regen_every > 0 && s % regen_every == 0)) {
      const std::uint64_t sub =
          derive_seed(seed, kSeedStep3Drivers, static_cast<std::uint64_t>(stage),
                      static_cast<std::uint64_t>(s / std::max<long>(regen_every, 1)));
      drivers = path::generate_drivers(sub, grid, n1, n2, problem.q, problem.mu0,
                                       problem.dim_x);
    }
    SimOutput sim = simulate(problem, fields, embeds, drivers, grid, sig, true, stage);
    nn::Value loss = bsde_loss(sim);
    const double loss_val = sim.tape.value(loss).data[0];
    sim.tape.backward(loss);

    auto step_net = [&](nn::NetParams& net, const nn::BoundNet& bound, nn::AdamState& st) {
      nn::NetGrads g = nn::collect_grads(sim.tape, bound);
      try {
        nn::adam_step(net, g, st, schedule.rate(s, stage));
      } catch (const TrainError& e) {
        throw TrainError(std::string("deep-BSDE training: ") + e.what(), stage, s);
      }
    };
    step_net(fields.u, sim.bindings.u, adams.u);
    step_net(fields.v, sim.bindings.v, adams.v);
    step_net(fields.v0, sim.bindings.v0, adams.v0);

    if (initial < 0.0) initial = loss_val;
    trace.losses.push_back(loss_val);
    high_streak = loss_val > 10.0 * initial ? high_streak + 1 : 0;
    if (high_streak >= 100)
      throw TrainError("deep-BSDE training diverged (loss above 10x initial for 100 steps)",
                       stage, s);
  }
  trace.final_loss = trace.losses.back();
  return trace;
}

namespace {

void atomic_save(const nn::NetParams& net, const std::filesystem::path& file) {
  const auto tmp = file.string() + ".tmp";
  nn::save_net(net, tmp);
  std::filesystem::rename(tmp, file);
}

struct Step2Data {
  std::array<std::optional<embed::EmbedDataset>, 5> sets;
};

// Builds the supervised datasets for every active m_i from one simulated
// block: rows over nodes 0..N_T-1 for m_1..m_4 and the terminal node for m_5.
Step2Data build_step2_data(const FbsdeProblem& problem, const SimOutput& sim,
                           const FeatureTable& features, const path::TimeGrid& grid) {
  Step2Data data;
  const std::size_t n1 = sim.n1, n2 = sim.n2, B = n1 * n2;
  const std::size_t dx = problem.dim_x;

  std::optional<path::CondEnsemble> theta;
  std::vector<double> theta_times;
  for (std::size_t i = 0; i < grid.n_steps; ++i) theta_times.push_back(grid.t(i));

  for (std::size_t mi = 0; mi < 5; ++mi) {
    if (problem.m_zero[mi]) continue;
    const bool terminal = mi == 4;
    if (!terminal && !theta.has_value()) {
      // one pairwise pass shared by all non-terminal embeddings
      theta = sim.theta_ensemble(problem);
    }

    const std::size_t n_times = terminal ? 1 : grid.n_steps;
    embed::EmbedDataset ds;
    ds.t_state = nn::Tensor::zeros({n_times * B, 1 + dx});
    ds.features = nn::Tensor::zeros({n_times * B, features.width});
    for (std::size_t ti = 0; ti < n_times; ++ti) {
      const std::size_t node = terminal ? grid.n_steps : ti;
      const double t = grid.t(node);
      const nn::Tensor& x = sim.xs[node];
      for (std::size_t i2 = 0; i2 < n2; ++i2) {
        auto feat = features.row(node, i2);
        for (std::size_t i1 = 0; i1 < n1; ++i1) {
          const std::size_t r = ti * B + i2 * n1 + i1;
          ds.t_state.data[r * (1 + dx)] = t;
          for (std::size_t k = 0; k < dx; ++k)
            ds.t_state.data[r * (1 + dx) + 1 + k] = x.data[(i2 * n1 + i1) * dx + k];
          std::copy(feat.begin(), feat.end(), ds.features.data.begin() + r * features.width);
        }
      }
    }

    embed::EmbedTarget tgt;
    if (terminal) {
      auto ens = sim.terminal_ensemble(problem);
      const std::vector<double> terminal_time{grid.t(grid.n_steps)};
      tgt = embed::compute_targets(problem.exact_m[mi], ens, problem.embed_dim,
                                   terminal_time);
    } else {
      tgt = embed::compute_targets(problem.exact_m[mi], *theta, problem.embed_dim,
                                   theta_times);
    }
    ds.targets = nn::Tensor::zeros({n_times * B, problem.embed_dim});
    std::copy(tgt.values.begin(), tgt.values.end(), ds.targets.data.begin());
    data.sets[mi] = std::move(ds);
  }
  return data;
}

}  // namespace

FpState fictitious_play(const FbsdeProblem& problem, const FpConfig& cfg,
                        const EvalHook& eval_hook) {
  problem.validate();
  cfg.grid.validate();

  FpState state;
  {
    path::Rng frng = path::Rng::stream(cfg.seed, path::StreamKind::ParamInit, kSeedFieldInit);
    state.fields = DecouplingFields::make(problem, cfg.sig, cfg.u_hidden, cfg.field_hidden,
                                          cfg.u_act, cfg.field_act, frng);
    state.field_adams = FieldAdams::for_fields(state.fields);
    for (std::size_t mi = 0; mi < 5; ++mi) {
      if (problem.m_zero[mi]) continue;
      path::Rng erng = path::Rng::stream(cfg.seed, path::StreamKind::ParamInit,
                                         kSeedEmbedInit, mi);
      state.embeds.m[mi] = embed::EmbedArch::make(
          cfg.variant, cfg.sig.feature, cfg.sig.depth, problem.q, problem.dim_x,
          problem.embed_dim, cfg.embed_hidden, cfg.embed_act, erng);
      state.embed_adams[mi] = nn::AdamState::for_net(state.embeds.m[mi]->net);
    }
  }

  const bool any_embed = [&] {
    for (bool z : problem.m_zero)
      if (!z) return true;
    return false;
  }();

  path::DriverBlock eval_drivers;
  if (eval_hook) {
    eval_drivers = path::generate_drivers(derive_seed(cfg.seed, kSeedEvalDrivers), cfg.grid,
                                          cfg.eval_n1, cfg.eval_n2, problem.q, problem.mu0,
                                          problem.dim_x);
  }

  for (int k = 1; k <= cfg.stages; ++k) {
    const auto stage_start = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.stage = k;
    state.stage = k;

    // Step 2: refit embeddings on the empirical conditional laws induced by
    // the stage-(k-1) networks.
    if (any_embed && cfg.step2_iters > 0) {
      const std::uint64_t u_before = nn::param_hash(state.fields.u);
      const std::uint64_t v_before = nn::param_hash(state.fields.v);

      long done = 0;
      long regen_idx = 0;
      while (done < cfg.step2_iters) {
        const long chunk = cfg.regen_every > 0
                               ? std::min<long>(cfg.regen_every, cfg.step2_iters - done)
                               : cfg.step2_iters;
        auto drivers = path::generate_drivers(
            derive_seed(cfg.seed, kSeedStageDrivers, static_cast<std::uint64_t>(k),
                        static_cast<std::uint64_t>(regen_idx)),
            cfg.grid, cfg.n1, cfg.n2, problem.q, problem.mu0, problem.dim_x);
        SimOutput sim = simulate(problem, state.fields, state.embeds, drivers, cfg.grid,
                                 cfg.sig, false, k);
        Step2Data data = build_step2_data(problem, sim, sim.features, cfg.grid);
        double chunk_loss = 0.0;
        for (std::size_t mi = 0; mi < 5; ++mi) {
          if (!data.sets[mi].has_value()) continue;
          auto res = embed::train_embed(*state.embeds.m[mi], *state.embed_adams[mi],
                                        *data.sets[mi], cfg.step2_schedule, chunk, k, done);
          chunk_loss += res.final_loss;
          for (double l : res.loss_trace) rec.step2_trace.push_back(l);
        }
        rec.embed_loss = chunk_loss;
        done += chunk;
        ++regen_idx;
      }

      if (nn::param_hash(state.fields.u) != u_before ||
          nn::param_hash(state.fields.v) != v_before)
        throw UsageError("fictitious_play: decoupling fields changed during Step 2");
    }

    // Step 3: deep-BSDE update of the fields under the frozen stage-k
    // embeddings.
    if (cfg.step3_iters > 0) {
      std::array<std::uint64_t, 5> m_before{};
      for (std::size_t mi = 0; mi < 5; ++mi)
        if (state.embeds.m[mi].has_value())
          m_before[mi] = nn::param_hash(state.embeds.m[mi]->net);

      TrainTrace trace = train_bsde(problem, state.fields, state.field_adams, state.embeds,
                                    cfg.grid, cfg.sig, cfg.step3_schedule, cfg.step3_iters,
                                    cfg.regen_every, cfg.n1, cfg.n2, cfg.seed, k);
      rec.bsde_loss = trace.final_loss;
      rec.step3_trace = std::move(trace.losses);

      for (std::size_t mi = 0; mi < 5; ++mi)
        if (state.embeds.m[mi].has_value() &&
            nn::param_hash(state.embeds.m[mi]->net) != m_before[mi])
          throw UsageError("fictitious_play: embeddings changed during Step 3");
    }

    if (eval_hook) {
      SimOutput eval_sim = simulate(problem, state.fields, state.embeds, eval_drivers,
                                    cfg.grid, cfg.sig, false, k);
      rec.eval = eval_hook(eval_sim, eval_drivers, cfg.grid);
      rec.eval.extras.emplace_back("terminal_loss", eval_sim.terminal_loss);
    }

    if (!cfg.checkpoint_dir.empty()) {
      const auto dir = std::filesystem::path(cfg.checkpoint_dir) /
                       ("stage_" + std::to_string(k));
      std::filesystem::create_directories(dir);
      atomic_save(state.fields.u, dir / "u.bin");
      atomic_save(state.fields.v, dir / "v.bin");
      atomic_save(state.fields.v0, dir / "v0.bin");
      for (std::size_t mi = 0; mi < 5; ++mi)
        if (state.embeds.m[mi].has_value())
          atomic_save(state.embeds.m[mi]->net, dir / ("m" + std::to_string(mi + 1) + ".bin"));
    }

    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - stage_start).count();
    state.history.push_back(std::move(rec));
  }
  return state;
}

}  // namespace mfsig::solver
