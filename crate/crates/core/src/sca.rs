//! Power allocation and SIC-order optimization for a fixed allocation.
//!
//! For a target MCOR `η`, the servers decouple. Server `m` can support `η`
//! iff some powers and order satisfy, for every device `k` on it,
//!
//! ```text
//! z_k(p) - l_k(p) >= η F_m
//! z_k = (F_m - η) Σ_i w_{k,i} + η Σ_{k'≠k} Σ_i v_{k',i}
//! l_k = (F_m - η) Σ_i v_{k,i} + η Σ_{k'≠k} Σ_i w_{k',i}
//! ```
//!
//! where `w - v` is the SIC rate of a sub-message written as a difference of
//! two concave logarithms. `max_p min_k (z_k - l_k)` is a DC program. It is
//! attacked by successive convex approximation: `l_k` is replaced by its
//! tangent plane at the current point, which over-estimates the concave
//! `l_k`, so the surrogate `z_k - l̂_k` is a global minorant that is tight at
//! the anchor. Each surrogate is solved by the barrier method in
//! [`crate::barrier`]. Around that, orders are re-derived from the powers
//! (descending received power), and an outer bisection searches `η`.
//!
//! Internally powers are normalized by the budgets (`y = p / P`) and the
//! objective by `B F_m / ln 2`, which keeps the barrier well scaled.

use std::cell::RefCell;
use std::f64::consts::LN_2;

use serde::Serialize;

use crate::barrier::{self, BarrierSettings, ConcavePieces};
use crate::error::{Error, Result};
use crate::rates::{
    Allocation, DecodingOrder, GroupOrder, Part, PowerAllocation, Solution, SubMessage,
};
use crate::scenario::Scenario;

/// Iteration limits and tolerances of the power/order solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaSettings {
    /// SCA stops when `‖p_{t+1} - p_t‖ / ‖p_t‖` falls to this.
    pub sca_tol: f64,
    /// SCA on the max-min objective also stops when the relative objective
    /// improvement falls to this. Zero disables the test.
    pub sca_obj_tol: f64,
    pub sca_max_iters: usize,
    /// Rounds of the power/order alternation.
    pub alt_max_iters: usize,
    /// Absolute bisection tolerance on `η` in bits/s; `None` uses
    /// `1e-4 · η_max`.
    pub bisection_tol_bps: Option<f64>,
    /// Duality-gap target of the inner barrier solve, in normalized units.
    pub inner_solver_tol: f64,
    /// Newton-step budget of one inner solve.
    pub inner_max_iters: usize,
    /// Start each bisection step from the last feasible powers.
    pub warm_start: bool,
    /// Start each order-update round from the powers of the previous round
    /// instead of the initial split.
    pub carry_powers: bool,
    /// End an SCA run as soon as the target `η F` is met.
    pub stop_when_feasible: bool,
}

impl Default for ScaSettings {
    fn default() -> Self {
        Self {
            sca_tol: 1e-4,
            sca_obj_tol: 1e-3,
            sca_max_iters: 30,
            alt_max_iters: 5,
            bisection_tol_bps: None,
            inner_solver_tol: 1e-6,
            inner_max_iters: 600,
            warm_start: false,
            carry_powers: true,
            stop_when_feasible: true,
        }
    }
}

impl ScaSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sca_tol > 0.0
            && self.sca_obj_tol >= 0.0
            && self.sca_max_iters > 0
            && self.alt_max_iters > 0
            && self.inner_solver_tol > 0.0
            && self.inner_max_iters > 0
            && self.bisection_tol_bps.map_or(true, |e| e > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "solver settings must be positive".into(),
            ))
        }
    }

    fn barrier(&self) -> BarrierSettings {
        BarrierSettings {
            gap_tol: self.inner_solver_tol,
            max_newton_steps: self.inner_max_iters,
            ..BarrierSettings::default()
        }
    }
}

/// Whether devices split their messages (RSMA) or send one message (NOMA).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SplitMode {
    Rsma,
    Noma,
}

impl SplitMode {
    pub fn parts(self) -> usize {
        match self {
            SplitMode::Rsma => 2,
            SplitMode::Noma => 1,
        }
    }
}

/// Feasibility subproblem of one server: its devices, their channels and
/// link gains, and the server's resources.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProblem {
    pub server: usize,
    /// Global device ids, ascending.
    pub devices: Vec<usize>,
    /// Channel of each local device.
    pub channels: Vec<usize>,
    /// `h_{m, n_k, k}` of each local device.
    pub gains: Vec<f64>,
    pub max_power: Vec<f64>,
    pub frequency: f64,
    pub bandwidth: f64,
    /// `σ² B` in W.
    pub noise_power: f64,
    pub deadline: f64,
    /// Sub-messages per device: 2 for RSMA, 1 for NOMA.
    pub parts: usize,
}

impl GroupProblem {
    /// The subproblem of `server` under `allocation`. Devices without a
    /// channel are excluded.
    pub fn new(
        scenario: &Scenario,
        allocation: &Allocation,
        server: usize,
        mode: SplitMode,
    ) -> Self {
        let devices = allocation.server_devices(server);
        let channels: Vec<usize> = devices
            .iter()
            .map(|&k| {
                allocation
                    .channel_of(k)
                    .expect("served device has a channel")
            })
            .collect();
        let gains = devices
            .iter()
            .zip(&channels)
            .map(|(&k, &n)| scenario.gain(server, n, k))
            .collect();
        let cfg = scenario.config();
        Self {
            server,
            max_power: devices.iter().map(|&k| scenario.max_power(k)).collect(),
            devices,
            channels,
            gains,
            frequency: scenario.frequency(server),
            bandwidth: cfg.bandwidth_hz,
            noise_power: cfg.noise_power_w(),
            deadline: cfg.deadline_s,
            parts: mode.parts(),
        }
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn num_messages(&self) -> usize {
        self.devices.len() * self.parts
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    fn parts_list(&self) -> &'static [Part] {
        &Part::BOTH[..self.parts]
    }

    /// Local message index of `msg`.
    pub fn message_index(&self, msg: SubMessage) -> Option<usize> {
        let local = self.devices.binary_search(&msg.device).ok()?;
        let p = msg.part.index();
        (p < self.parts).then_some(local * self.parts + p)
    }

    pub fn message(&self, j: usize) -> SubMessage {
        SubMessage::new(self.devices[j / self.parts], Part::BOTH[j % self.parts])
    }

    /// Distinct channels in use, ascending, with their local devices.
    pub fn channel_groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut chans: Vec<usize> = self.channels.clone();
        chans.sort_unstable();
        chans.dedup();
        chans
            .into_iter()
            .map(|n| {
                let locals = (0..self.devices.len())
                    .filter(|&i| self.channels[i] == n)
                    .collect();
                (n, locals)
            })
            .collect()
    }

    /// Every device at half its budget on each part (first part only for
    /// single-message devices).
    pub fn initial_powers(&self) -> Vec<f64> {
        (0..self.num_messages())
            .map(|j| self.max_power[j / self.parts] / self.parts as f64)
            .collect()
    }

    pub fn gather(&self, powers: &PowerAllocation) -> Vec<f64> {
        (0..self.num_messages())
            .map(|j| powers.get(self.message(j)))
            .collect()
    }

    pub fn scatter(&self, local: &[f64], powers: &mut PowerAllocation) {
        for &k in &self.devices {
            for p in Part::BOTH {
                powers.set(SubMessage::new(k, p), 0.0);
            }
        }
        for (j, &v) in local.iter().enumerate() {
            powers.set(self.message(j), v);
        }
    }

    /// Single-user capacity of each local device at full power, bits/s.
    pub fn single_user_capacity(&self) -> Vec<f64> {
        (0..self.num_devices())
            .map(|i| {
                crate::rates::shannon_rate(
                    self.bandwidth,
                    self.gains[i] * self.max_power[i],
                    self.noise_power,
                )
            })
            .collect()
    }
}

/// Message-level structure of a server under fixed decoding orders.
#[derive(Debug, Clone)]
struct Layout {
    /// Local device owning each message.
    owner: Vec<usize>,
    /// Normalized slope `h P / (σ² B)` of each message.
    slope: Vec<f64>,
    /// Messages decoded after each message on the same channel.
    later: Vec<Vec<usize>>,
    /// Messages of each local device.
    own: Vec<Vec<usize>>,
}

impl Layout {
    fn new(problem: &GroupProblem, orders: &[GroupOrder]) -> Result<Self> {
        let n = problem.num_messages();
        let mut later = vec![None; n];
        for go in orders {
            if go.server != problem.server {
                return Err(Error::Domain("order belongs to another server".into()));
            }
            let idx: Vec<usize> = go
                .order
                .sequence()
                .iter()
                .map(|m| {
                    problem.message_index(*m).ok_or_else(|| {
                        Error::Domain(format!("{m:?} is not a message of this server"))
                    })
                })
                .collect::<Result<_>>()?;
            for (pos, &j) in idx.iter().enumerate() {
                let local = j / problem.parts;
                if problem.channels[local] != go.channel {
                    return Err(Error::Domain(format!(
                        "{:?} ordered on the wrong channel",
                        problem.message(j)
                    )));
                }
                if later[j].is_some() {
                    return Err(Error::Domain("sub-message ordered twice".into()));
                }
                later[j] = Some(idx[pos + 1..].to_vec());
            }
        }
        let later: Vec<Vec<usize>> = later
            .into_iter()
            .enumerate()
            .map(|(j, l)| {
                l.ok_or_else(|| Error::Domain(format!("{:?} has no rank", problem.message(j))))
            })
            .collect::<Result<_>>()?;
        let owner: Vec<usize> = (0..n).map(|j| j / problem.parts).collect();
        let slope = (0..n)
            .map(|j| problem.gains[owner[j]] * problem.max_power[owner[j]] / problem.noise_power)
            .collect();
        let own = (0..problem.num_devices())
            .map(|i| (i * problem.parts..(i + 1) * problem.parts).collect())
            .collect();
        Ok(Self {
            owner,
            slope,
            later,
            own,
        })
    }

    fn len(&self) -> usize {
        self.owner.len()
    }

    /// Normalized interference `Σ_{S_j} a y` and interference-plus-own sums.
    fn sums_into(&self, y: &[f64], v: &mut [f64], w: &mut [f64]) {
        for j in 0..self.len() {
            let i: f64 = self.later[j].iter().map(|&q| self.slope[q] * y[q]).sum();
            v[j] = i;
            w[j] = i + self.slope[j] * y[j];
        }
    }

    fn sums(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let (mut v, mut w) = (vec![0.0; n], vec![0.0; n]);
        self.sums_into(y, &mut v, &mut w);
        (v, w)
    }

    /// Gradients of `ln(1 + V_j)` and `ln(1 + W_j)` with respect to `y`, as
    /// row-major `n × n` tables (row `j` is message `j`).
    fn log_grads_into(&self, vsum: &[f64], wsum: &[f64], gv: &mut [f64], gw: &mut [f64]) {
        let n = self.len();
        gv.fill(0.0);
        gw.fill(0.0);
        for j in 0..n {
            let dv = 1.0 / (1.0 + vsum[j]);
            let dw = 1.0 / (1.0 + wsum[j]);
            for &q in &self.later[j] {
                gv[j * n + q] = self.slope[q] * dv;
                gw[j * n + q] = self.slope[q] * dw;
            }
            gw[j * n + j] = self.slope[j] * dw;
        }
    }

    fn log_grads(&self, vsum: &[f64], wsum: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let (mut gv, mut gw) = (vec![0.0; n * n], vec![0.0; n * n]);
        self.log_grads_into(vsum, wsum, &mut gv, &mut gw);
        (gv, gw)
    }

    /// Per-device link rate in nats per Hz.
    fn device_rates(&self, y: &[f64]) -> Vec<f64> {
        let (v, w) = self.sums(y);
        self.own
            .iter()
            .map(|msgs| {
                msgs.iter()
                    .map(|&j| ((w[j] - v[j]) / (1.0 + v[j])).ln_1p())
                    .sum()
            })
            .collect()
    }
}

/// `out += coef · g gᵀ` on a row-major `n × n` table, skipping the zero
/// entries of `g`.
fn add_outer(out: &mut [f64], g: &[f64], coef: f64) {
    let n = g.len();
    for a in 0..n {
        if g[a] == 0.0 {
            continue;
        }
        let ca = coef * g[a];
        let r = &mut out[a * n..(a + 1) * n];
        for b in 0..n {
            r[b] += ca * g[b];
        }
    }
}

fn axpy(dst: &mut [f64], coef: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += coef * s;
    }
}

fn row(table: &[f64], n: usize, j: usize) -> &[f64] {
    &table[j * n..(j + 1) * n]
}

/// Buffers reused across evaluations of one surrogate.
struct Scratch {
    v: Vec<f64>,
    w: Vec<f64>,
    gv: Vec<f64>,
    gw: Vec<f64>,
    g_total: Vec<f64>,
    /// Per-device gradient rows (rate surrogates only).
    gk: Vec<f64>,
    /// Per-device `R̂_k + δ` (proportional fairness only).
    u: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, devices: usize) -> RefCell<Self> {
        RefCell::new(Self {
            v: vec![0.0; n],
            w: vec![0.0; n],
            gv: vec![0.0; n * n],
            gw: vec![0.0; n * n],
            g_total: vec![0.0; n],
            gk: vec![0.0; devices * n],
            u: vec![0.0; devices],
        })
    }
}

/// Normalized max-min surrogate: piece `k` is `(z_k - l̂_k) ln2 / (B F)` in
/// terms of `y = p / P`.
struct MaxMinPieces<'a> {
    layout: &'a Layout,
    c_own: f64,
    c_other: f64,
    l_ref: Vec<f64>,
    l_grad: Vec<Vec<f64>>,
    y_ref: Vec<f64>,
    scratch: RefCell<Scratch>,
}

impl<'a> MaxMinPieces<'a> {
    fn new(layout: &'a Layout, frequency: f64, eta: f64, y_ref: &[f64]) -> Self {
        let c_own = (frequency - eta) / frequency;
        let c_other = eta / frequency;
        let n = layout.len();
        let (v, w) = layout.sums(y_ref);
        let (gv, gw) = layout.log_grads(&v, &w);
        let lv: Vec<f64> = v.iter().map(|x| x.ln_1p()).collect();
        let lw: Vec<f64> = w.iter().map(|x| x.ln_1p()).collect();
        let total_w: f64 = lw.iter().sum();
        let mut gw_total = vec![0.0; n];
        for j in 0..n {
            axpy(&mut gw_total, 1.0, row(&gw, n, j));
        }
        let mut l_ref = Vec::with_capacity(layout.own.len());
        let mut l_grad = Vec::with_capacity(layout.own.len());
        for msgs in &layout.own {
            let own_v: f64 = msgs.iter().map(|&j| lv[j]).sum();
            let own_w: f64 = msgs.iter().map(|&j| lw[j]).sum();
            l_ref.push(c_own * own_v + c_other * (total_w - own_w));
            let mut g = vec![0.0; n];
            axpy(&mut g, c_other, &gw_total);
            for &j in msgs {
                axpy(&mut g, c_own, row(&gv, n, j));
                axpy(&mut g, -c_other, row(&gw, n, j));
            }
            l_grad.push(g);
        }
        Self {
            layout,
            c_own,
            c_other,
            l_ref,
            l_grad,
            y_ref: y_ref.to_vec(),
            scratch: Scratch::new(n, layout.own.len()),
        }
    }

    fn linear_part(&self, k: usize, y: &[f64]) -> f64 {
        self.l_ref[k]
            + self.l_grad[k]
                .iter()
                .zip(y.iter().zip(&self.y_ref))
                .map(|(g, (a, b))| g * (a - b))
                .sum::<f64>()
    }

    fn values_with(&self, sc: &mut Scratch, y: &[f64], out: &mut [f64]) -> bool {
        let Scratch { v, w, .. } = sc;
        self.layout.sums_into(y, v, w);
        let total_v: f64 = v.iter().map(|x| x.ln_1p()).sum();
        for (k, msgs) in self.layout.own.iter().enumerate() {
            let own_w: f64 = msgs.iter().map(|&j| w[j].ln_1p()).sum();
            let own_v: f64 = msgs.iter().map(|&j| v[j].ln_1p()).sum();
            out[k] = self.c_own * own_w + self.c_other * (total_v - own_v) - self.linear_part(k, y);
        }
        out.iter().all(|x| x.is_finite())
    }
}

impl ConcavePieces for MaxMinPieces<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn count(&self) -> usize {
        self.layout.own.len()
    }

    fn values(&self, y: &[f64], out: &mut [f64]) -> bool {
        self.values_with(&mut self.scratch.borrow_mut(), y, out)
    }

    fn gradients(&self, y: &[f64], values: &mut [f64], grad: &mut [f64]) -> bool {
        let mut guard = self.scratch.borrow_mut();
        let sc = &mut *guard;
        if !self.values_with(sc, y, values) {
            return false;
        }
        let n = self.layout.len();
        self.layout
            .log_grads_into(&sc.v, &sc.w, &mut sc.gv, &mut sc.gw);
        let g_total = &mut sc.g_total;
        g_total.fill(0.0);
        for j in 0..n {
            axpy(g_total, 1.0, row(&sc.gv, n, j));
        }
        for (k, msgs) in self.layout.own.iter().enumerate() {
            let g = &mut grad[k * n..(k + 1) * n];
            g.fill(0.0);
            axpy(g, self.c_other, g_total);
            axpy(g, -1.0, &self.l_grad[k]);
            for &j in msgs {
                axpy(g, self.c_own, row(&sc.gw, n, j));
                axpy(g, -self.c_other, row(&sc.gv, n, j));
            }
        }
        true
    }

    fn add_weighted_hessian(&self, _y: &[f64], weights: &[f64], out: &mut [f64]) {
        // ∇² ln(1 + a·y) = -g gᵀ with g its gradient.
        let sc = self.scratch.borrow();
        let n = self.layout.len();
        let total: f64 = weights.iter().sum();
        for j in 0..n {
            let wk = weights[self.layout.owner[j]];
            add_outer(out, row(&sc.gv, n, j), self.c_other * (wk - total));
            add_outer(out, row(&sc.gw, n, j), -self.c_own * wk);
        }
    }
}

/// Objectives that the SCA engine can ascend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    /// `min_k (z_k - l_k)` for a target `η`.
    MaxMin { eta: f64 },
    /// Sum of link rates.
    SumRate,
    /// `Σ_k ln(R_k + δ)` with `δ` in bits/s.
    PropFair { delta_bps: f64 },
}

/// Single-piece surrogate for the sum-rate and proportional-fair utilities:
/// every `v` term is linearized at the anchor, giving a concave minorant
/// `R̂_k` of each link rate.
struct RatePieces<'a> {
    layout: &'a Layout,
    lv_ref: Vec<f64>,
    gv_ref: Vec<f64>,
    y_ref: Vec<f64>,
    /// `None` for sum-rate, `Some(δ)` (nats/Hz) for proportional fairness.
    delta: Option<f64>,
    scratch: RefCell<Scratch>,
}

impl<'a> RatePieces<'a> {
    fn new(layout: &'a Layout, y_ref: &[f64], delta: Option<f64>) -> Self {
        let (v, w) = layout.sums(y_ref);
        let (gv, _) = layout.log_grads(&v, &w);
        Self {
            layout,
            lv_ref: v.iter().map(|x| x.ln_1p()).collect(),
            gv_ref: gv,
            y_ref: y_ref.to_vec(),
            delta,
            scratch: Scratch::new(layout.len(), layout.own.len()),
        }
    }

    fn v_hat(&self, j: usize, y: &[f64]) -> f64 {
        self.lv_ref[j]
            + row(&self.gv_ref, self.layout.len(), j)
                .iter()
                .zip(y.iter().zip(&self.y_ref))
                .map(|(g, (a, b))| g * (a - b))
                .sum::<f64>()
    }

    /// Fills `sc.u` with `R̂_k` and returns the utility value.
    fn values_with(&self, sc: &mut Scratch, y: &[f64]) -> Option<f64> {
        let Scratch { v, w, u, .. } = sc;
        self.layout.sums_into(y, v, w);
        for (k, msgs) in self.layout.own.iter().enumerate() {
            u[k] = msgs.iter().map(|&j| w[j].ln_1p() - self.v_hat(j, y)).sum();
        }
        let value = match self.delta {
            None => u.iter().sum(),
            Some(d) => {
                for x in u.iter_mut() {
                    *x += d;
                    if !(*x > 0.0) {
                        return None;
                    }
                }
                u.iter().map(|x| x.ln()).sum()
            }
        };
        f64::is_finite(value).then_some(value)
    }
}

impl ConcavePieces for RatePieces<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn count(&self) -> usize {
        1
    }

    fn values(&self, y: &[f64], out: &mut [f64]) -> bool {
        match self.values_with(&mut self.scratch.borrow_mut(), y) {
            Some(v) => {
                out[0] = v;
                true
            }
            None => false,
        }
    }

    fn gradients(&self, y: &[f64], values: &mut [f64], grad: &mut [f64]) -> bool {
        let mut guard = self.scratch.borrow_mut();
        let sc = &mut *guard;
        let Some(value) = self.values_with(sc, y) else {
            return false;
        };
        values[0] = value;
        let n = self.layout.len();
        self.layout
            .log_grads_into(&sc.v, &sc.w, &mut sc.gv, &mut sc.gw);
        grad[..n].fill(0.0);
        for (k, msgs) in self.layout.own.iter().enumerate() {
            let gk = &mut sc.gk[k * n..(k + 1) * n];
            gk.fill(0.0);
            for &j in msgs {
                axpy(gk, 1.0, row(&sc.gw, n, j));
                axpy(gk, -1.0, row(&self.gv_ref, n, j));
            }
            let scale = self.delta.map_or(1.0, |_| 1.0 / sc.u[k]);
            axpy(&mut grad[..n], scale, gk);
        }
        true
    }

    fn add_weighted_hessian(&self, _y: &[f64], weights: &[f64], out: &mut [f64]) {
        let sc = self.scratch.borrow();
        let n = self.layout.len();
        for (k, msgs) in self.layout.own.iter().enumerate() {
            let scale = self.delta.map_or(1.0, |_| 1.0 / sc.u[k]);
            for &j in msgs {
                add_outer(out, row(&sc.gw, n, j), -weights[0] * scale);
            }
            if self.delta.is_some() {
                add_outer(out, &sc.gk[k * n..(k + 1) * n], -weights[0] * scale * scale);
            }
        }
    }
}

/// `(w, v)` of every local message, in bits/s, with
/// `w = B log2(σ²B + I + h p)` and `v = B log2(σ²B + I)`.
pub fn wv_terms(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    powers: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let layout = Layout::new(problem, orders)?;
    let b = problem.bandwidth;
    Ok((0..layout.len())
        .map(|j| {
            let interference: f64 = layout.later[j]
                .iter()
                .map(|&q| problem.gains[layout.owner[q]] * powers[q])
                .sum();
            let own = problem.gains[layout.owner[j]] * powers[j];
            let base = problem.noise_power + interference;
            (b * (base + own).log2(), b * base.log2())
        })
        .collect())
}

/// Link rate `Σ_i (w - v)` of every local device, bits/s.
pub fn device_link_rates(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    powers: &[f64],
) -> Result<Vec<f64>> {
    let layout = Layout::new(problem, orders)?;
    let y = normalize(problem, powers);
    Ok(layout
        .device_rates(&y)
        .into_iter()
        .map(|r| r * problem.bandwidth / LN_2)
        .collect())
}

/// `(z_k, l_k)` of every local device for target `eta`.
pub fn zl_values(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    powers: &[f64],
    eta: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(eta < problem.frequency) {
        return Err(Error::Domain(format!(
            "target {eta} is not below the server frequency {}",
            problem.frequency
        )));
    }
    let wv = wv_terms(problem, orders, powers)?;
    let parts = problem.parts;
    let f = problem.frequency;
    let sum_w: Vec<f64> = (0..problem.num_devices())
        .map(|i| (0..parts).map(|p| wv[i * parts + p].0).sum())
        .collect();
    let sum_v: Vec<f64> = (0..problem.num_devices())
        .map(|i| (0..parts).map(|p| wv[i * parts + p].1).sum())
        .collect();
    let tot_w: f64 = sum_w.iter().sum();
    let tot_v: f64 = sum_v.iter().sum();
    Ok((0..problem.num_devices())
        .map(|i| {
            let z = (f - eta) * sum_w[i] + eta * (tot_v - sum_v[i]);
            let l = (f - eta) * sum_v[i] + eta * (tot_w - sum_w[i]);
            (z, l)
        })
        .collect())
}

/// Exact `min_k (z_k - l_k)`, computed from link rates as
/// `(F - η) R_k - η Σ_{k'≠k} R_{k'}` to avoid cancellation.
pub fn maxmin_objective(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    powers: &[f64],
    eta: f64,
) -> Result<f64> {
    let rates = device_link_rates(problem, orders, powers)?;
    Ok(maxmin_from_rates(&rates, problem.frequency, eta))
}

fn maxmin_from_rates(rates: &[f64], frequency: f64, eta: f64) -> f64 {
    let total: f64 = rates.iter().sum();
    rates
        .iter()
        .map(|r| (frequency - eta) * r - eta * (total - r))
        .fold(f64::INFINITY, f64::min)
}

fn normalize(problem: &GroupProblem, powers: &[f64]) -> Vec<f64> {
    powers
        .iter()
        .enumerate()
        .map(|(j, p)| p / problem.max_power[j / problem.parts])
        .collect()
}

fn denormalize(problem: &GroupProblem, y: &[f64]) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(j, v)| v * problem.max_power[j / problem.parts])
        .collect()
}

/// First-order over-estimator `l̂_k(p) = l_k(p_ref) + ∇l_k(p_ref) · (p - p_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minorant {
    pub p_ref: Vec<f64>,
    /// `l_k(p_ref)` per local device.
    pub l_ref: Vec<f64>,
    /// `∂l_k / ∂p_j` per local device, in bits/s per W.
    pub gradient: Vec<Vec<f64>>,
}

impl Minorant {
    pub fn eval(&self, powers: &[f64]) -> Vec<f64> {
        self.l_ref
            .iter()
            .zip(&self.gradient)
            .map(|(l, g)| {
                l + g
                    .iter()
                    .zip(powers.iter().zip(&self.p_ref))
                    .map(|(gi, (p, q))| gi * (p - q))
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Tangent plane of every `l_k` at `p_ref`. Derivatives of `v` and `w` are
/// `B h' / ((σ²B + I) ln 2)` and `B h' / ((σ²B + I + h p) ln 2)` on their
/// supports.
pub fn linearize(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    p_ref: &[f64],
    eta: f64,
) -> Result<Minorant> {
    let zl = zl_values(problem, orders, p_ref, eta)?;
    let layout = Layout::new(problem, orders)?;
    let n = layout.len();
    let b = problem.bandwidth;
    let f = problem.frequency;
    let h = |j: usize| problem.gains[layout.owner[j]];
    let mut dv = vec![vec![0.0; n]; n];
    let mut dw = vec![vec![0.0; n]; n];
    for j in 0..n {
        let base = problem.noise_power
            + layout.later[j]
                .iter()
                .map(|&q| h(q) * p_ref[q])
                .sum::<f64>();
        let full = base + h(j) * p_ref[j];
        for &q in &layout.later[j] {
            dv[j][q] = b * h(q) / (base * LN_2);
            dw[j][q] = b * h(q) / (full * LN_2);
        }
        dw[j][j] = b * h(j) / (full * LN_2);
    }
    let gradient = layout
        .own
        .iter()
        .map(|msgs| {
            let mut g = vec![0.0; n];
            for j in 0..n {
                if msgs.contains(&j) {
                    axpy(&mut g, f - eta, &dv[j]);
                } else {
                    axpy(&mut g, eta, &dw[j]);
                }
            }
            g
        })
        .collect();
    Ok(Minorant {
        p_ref: p_ref.to_vec(),
        l_ref: zl.iter().map(|(_, l)| *l).collect(),
        gradient,
    })
}

/// Result of one convex surrogate solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub powers: Vec<f64>,
    /// Surrogate objective at `powers`, in the utility's natural units.
    pub objective: f64,
    /// Surrogate objective at the anchor (equal to the true objective there).
    pub anchor_objective: f64,
    /// The solver made no progress and the anchor was returned.
    pub stalled: bool,
}

/// Multiplier from normalized surrogate units back to natural units.
fn objective_scale(problem: &GroupProblem, utility: Utility) -> f64 {
    match utility {
        Utility::MaxMin { .. } => problem.bandwidth * problem.frequency / LN_2,
        Utility::SumRate => problem.bandwidth / LN_2,
        Utility::PropFair { .. } => 1.0,
    }
}

fn interior_start(problem: &GroupProblem, y_ref: &[f64]) -> Vec<f64> {
    let center = 1.0 / (problem.parts as f64 + 1.0);
    let theta = 0.01;
    y_ref
        .iter()
        .map(|v| (1.0 - theta) * v.clamp(0.0, 1.0) + theta * center)
        .collect()
}

fn surrogate_solve(
    problem: &GroupProblem,
    layout: &Layout,
    p_ref: &[f64],
    utility: Utility,
    settings: &ScaSettings,
) -> InnerOutcome {
    let y_ref = normalize(problem, p_ref);
    let blocks = layout.own.clone();
    let y0 = interior_start(problem, &y_ref);
    let scale = objective_scale(problem, utility);
    let (anchor, result) = match utility {
        Utility::MaxMin { eta } => {
            let pieces = MaxMinPieces::new(layout, problem.frequency, eta, &y_ref);
            let mut vals = vec![0.0; pieces.count()];
            pieces.values(&y_ref, &mut vals);
            let anchor = vals.iter().copied().fold(f64::INFINITY, f64::min);
            (
                anchor,
                barrier::maximize_min(&pieces, &blocks, &y0, &settings.barrier()),
            )
        }
        Utility::SumRate | Utility::PropFair { .. } => {
            let delta = match utility {
                Utility::PropFair { delta_bps } => Some(delta_bps * LN_2 / problem.bandwidth),
                _ => None,
            };
            let pieces = RatePieces::new(layout, &y_ref, delta);
            let mut vals = [0.0];
            pieces.values(&y_ref, &mut vals);
            (
                vals[0],
                barrier::maximize_min(&pieces, &blocks, &y0, &settings.barrier()),
            )
        }
    };
    match result {
        Some(out) if out.objective >= anchor => InnerOutcome {
            powers: denormalize(problem, &out.y),
            objective: out.objective * scale,
            anchor_objective: anchor * scale,
            stalled: false,
        },
        _ => InnerOutcome {
            powers: p_ref.to_vec(),
            objective: anchor * scale,
            anchor_objective: anchor * scale,
            stalled: true,
        },
    }
}

/// Maximizes `min_k (z_k - l̂_k)` over the power box-simplex, with `l̂`
/// anchored at `p_ref`. Never returns a point whose surrogate objective is
/// below the anchor's.
pub fn solve_inner(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    p_ref: &[f64],
    eta: f64,
    settings: &ScaSettings,
) -> Result<InnerOutcome> {
    if !(eta < problem.frequency) {
        return Err(Error::Domain(
            "target must be below the server frequency".into(),
        ));
    }
    let layout = Layout::new(problem, orders)?;
    Ok(surrogate_solve(
        problem,
        &layout,
        p_ref,
        Utility::MaxMin { eta },
        settings,
    ))
}

/// Exact utility value at `powers`, natural units.
pub fn utility_value(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    powers: &[f64],
    utility: Utility,
) -> Result<f64> {
    let rates = device_link_rates(problem, orders, powers)?;
    Ok(utility_from_rates(problem, &rates, utility))
}

fn utility_from_rates(problem: &GroupProblem, rates: &[f64], utility: Utility) -> f64 {
    match utility {
        Utility::MaxMin { eta } => maxmin_from_rates(rates, problem.frequency, eta),
        Utility::SumRate => rates.iter().sum(),
        Utility::PropFair { delta_bps } => rates.iter().map(|r| (r + delta_bps).ln()).sum(),
    }
}

/// Trace of one SCA run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaOutcome {
    pub powers: Vec<f64>,
    /// Exact utility at `powers`.
    pub objective: f64,
    /// Surrogate solves performed.
    pub iterations: usize,
    /// Whether the power-change criterion was met.
    pub converged: bool,
    /// Exact utility after every iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Successive convex approximation of `utility` under fixed orders. With
/// `stop_at`, iteration also ends once the utility reaches that value.
pub fn sca_ascend(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    utility: Utility,
    settings: &ScaSettings,
    start: Option<&[f64]>,
    stop_at: Option<f64>,
) -> Result<ScaOutcome> {
    let layout = Layout::new(problem, orders)?;
    let mut p = start.map_or_else(|| problem.initial_powers(), <[f64]>::to_vec);
    let rates_of = |p: &[f64]| -> Vec<f64> {
        layout
            .device_rates(&normalize(problem, p))
            .into_iter()
            .map(|r| r * problem.bandwidth / LN_2)
            .collect()
    };
    let mut objective = utility_from_rates(problem, &rates_of(&p), utility);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.sca_max_iters {
        iterations += 1;
        let inner = surrogate_solve(problem, &layout, &p, utility, settings);
        let candidate = utility_from_rates(problem, &rates_of(&inner.powers), utility);
        if inner.stalled || !(candidate >= objective) {
            // No ascent possible from here.
            converged = true;
            trace.push(objective);
            break;
        }
        let norm = p
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let change = p
            .iter()
            .zip(&inner.powers)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / norm;
        let gain = match utility {
            Utility::MaxMin { .. } => {
                (candidate - objective)
                    / candidate.abs().max(objective.abs()).max(f64::MIN_POSITIVE)
            }
            Utility::SumRate | Utility::PropFair { .. } => f64::INFINITY,
        };
        p = inner.powers;
        objective = candidate;
        trace.push(objective);
        if change <= settings.sca_tol
            || gain <= settings.sca_obj_tol
            || stop_at.is_some_and(|v| objective >= v)
        {
            converged = true;
            break;
        }
    }
    Ok(ScaOutcome {
        powers: p,
        objective,
        iterations,
        converged,
        trace,
    })
}

/// SCA on the max-min feasibility objective for target `eta`.
pub fn sca_maximin_power(
    problem: &GroupProblem,
    orders: &[GroupOrder],
    eta: f64,
    settings: &ScaSettings,
    start: Option<&[f64]>,
) -> Result<ScaOutcome> {
    if !(eta < problem.frequency) {
        return Err(Error::Domain(
            "target must be below the server frequency".into(),
        ));
    }
    let stop_at = settings
        .stop_when_feasible
        .then(|| feasibility_target(problem, eta));
    sca_ascend(
        problem,
        orders,
        Utility::MaxMin { eta },
        settings,
        start,
        stop_at,
    )
}

fn sort_desc_by(keys: &mut [(f64, SubMessage)]) {
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// Heuristic power-independent order: all first parts, then all second
/// parts, each block by descending gain (ties by device index).
pub fn init_decoding_order(problem: &GroupProblem) -> Vec<GroupOrder> {
    problem
        .channel_groups()
        .into_iter()
        .map(|(channel, locals)| {
            let mut seq = Vec::new();
            for &part in problem.parts_list() {
                let mut keys: Vec<(f64, SubMessage)> = locals
                    .iter()
                    .map(|&i| (problem.gains[i], SubMessage::new(problem.devices[i], part)))
                    .collect();
                sort_desc_by(&mut keys);
                seq.extend(keys.into_iter().map(|(_, m)| m));
            }
            GroupOrder {
                server: problem.server,
                channel,
                order: DecodingOrder::new(seq).expect("distinct sub-messages"),
            }
        })
        .collect()
}

/// Order by descending received power `h p` (ties by device, then part).
pub fn order_from_powers(problem: &GroupProblem, powers: &[f64]) -> Vec<GroupOrder> {
    problem
        .channel_groups()
        .into_iter()
        .map(|(channel, locals)| {
            let mut keys: Vec<(f64, SubMessage)> = locals
                .iter()
                .flat_map(|&i| {
                    problem.parts_list().iter().map(move |&part| {
                        let j = i * problem.parts + part.index();
                        (
                            problem.gains[i] * powers[j],
                            SubMessage::new(problem.devices[i], part),
                        )
                    })
                })
                .collect();
            sort_desc_by(&mut keys);
            GroupOrder {
                server: problem.server,
                channel,
                order: DecodingOrder::new(keys.into_iter().map(|(_, m)| m).collect())
                    .expect("distinct sub-messages"),
            }
        })
        .collect()
}

/// One row of the optional solver trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaTraceRow {
    pub step: usize,
    pub eta: f64,
    pub server: usize,
    pub round: usize,
    pub iteration: usize,
    pub objective: f64,
    pub feasible: bool,
}

/// Counters collected while solving.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    /// Iterations used by every SCA invocation.
    pub sca_iterations: Vec<usize>,
    /// Surrogate solves that returned the anchor.
    pub stalls: usize,
    /// Per-iteration trace, recorded only when enabled.
    pub trace: Option<Vec<ScaTraceRow>>,
    pub(crate) step: usize,
}

impl SolverStats {
    pub fn with_trace() -> Self {
        Self {
            trace: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn merge(&mut self, other: SolverStats) {
        self.sca_iterations.extend(other.sca_iterations);
        self.stalls += other.stalls;
        if let (Some(t), Some(o)) = (self.trace.as_mut(), other.trace) {
            t.extend(o);
        }
    }

    pub(crate) fn record(
        &mut self,
        problem: &GroupProblem,
        eta: f64,
        round: usize,
        outcome: &ScaOutcome,
        target: f64,
    ) {
        self.sca_iterations.push(outcome.iterations);
        if let Some(t) = self.trace.as_mut() {
            for (iteration, obj) in outcome.trace.iter().enumerate() {
                t.push(ScaTraceRow {
                    step: self.step,
                    eta,
                    server: problem.server,
                    round,
                    iteration,
                    objective: *obj,
                    feasible: *obj >= target,
                });
            }
        }
    }
}

/// Best point found for one server at one target.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOutcome {
    pub powers: Vec<f64>,
    pub orders: Vec<GroupOrder>,
    /// `min_k (z_k - l_k)` at `powers`.
    pub objective: f64,
    pub feasible: bool,
}

/// Feasibility threshold `η F` with a relative allowance for solver
/// tolerance.
pub fn feasibility_target(problem: &GroupProblem, eta: f64) -> f64 {
    eta * problem.frequency - 1e-9 * problem.frequency
}

/// Alternates SCA power allocation with received-power order updates until
/// the target is met, the order stops changing, or the round cap is hit.
/// NOMA problems keep their gain-ordered single messages and run one round.
pub fn alternating_power_order(
    problem: &GroupProblem,
    eta: f64,
    settings: &ScaSettings,
    stats: &mut SolverStats,
    start: Option<&[f64]>,
) -> Result<ServerOutcome> {
    let target = feasibility_target(problem, eta);
    let mut orders = init_decoding_order(problem);
    let mut best: Option<ServerOutcome> = None;
    let mut carry: Option<Vec<f64>> = None;
    for round in 0..settings.alt_max_iters {
        let from = if settings.carry_powers {
            carry.as_deref().or(start)
        } else {
            start
        };
        let sca = sca_maximin_power(problem, &orders, eta, settings, from)?;
        stats.record(problem, eta, round, &sca, target);
        let feasible = sca.objective >= target;
        if best.as_ref().map_or(true, |b| sca.objective > b.objective) {
            best = Some(ServerOutcome {
                powers: sca.powers.clone(),
                orders: orders.clone(),
                objective: sca.objective,
                feasible,
            });
        }
        if feasible || problem.parts == 1 {
            break;
        }
        let next = order_from_powers(problem, &sca.powers);
        if next == orders {
            break;
        }
        orders = next;
        carry = Some(sca.powers);
    }
    Ok(best.expect("at least one round"))
}

/// Per-server feasibility oracle used by the bisection.
pub type FeasibilityCheck<'a> =
    dyn Fn(&GroupProblem, f64, &mut SolverStats, Option<&[f64]>) -> Result<ServerOutcome> + 'a;

/// Upper end of the `η` search interval: below every used server's
/// frequency and every served device's single-user capacity.
pub fn eta_upper_bound(problems: &[GroupProblem]) -> f64 {
    problems
        .iter()
        .filter(|p| !p.is_empty())
        .flat_map(|p| std::iter::once(p.frequency * (1.0 - 1e-9)).chain(p.single_user_capacity()))
        .fold(f64::INFINITY, f64::min)
}

/// Bisection over the common target `η` with a pluggable per-server check.
pub fn bisection_with(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    mode: SplitMode,
    stats: &mut SolverStats,
    check: &FeasibilityCheck<'_>,
) -> Result<Solution> {
    settings.validate()?;
    allocation.validate()?;
    let problems: Vec<GroupProblem> = (0..scenario.num_servers())
        .map(|m| GroupProblem::new(scenario, allocation, m, mode))
        .filter(|p| !p.is_empty())
        .collect();
    if problems.is_empty() {
        return Ok(Solution::idle(scenario, allocation));
    }
    let eta_max = eta_upper_bound(&problems);
    let eps = settings.bisection_tol_bps.unwrap_or(1e-4 * eta_max);
    let (mut lo, mut hi) = (0.0, eta_max);
    let mut best: Option<Vec<ServerOutcome>> = None;
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; problems.len()];

    let run = |eta: f64,
               stats: &mut SolverStats,
               warm: &[Option<Vec<f64>>]|
     -> Result<Option<Vec<ServerOutcome>>> {
        let mut outs = Vec::with_capacity(problems.len());
        for (i, p) in problems.iter().enumerate() {
            let start = if settings.warm_start {
                warm[i].as_deref()
            } else {
                None
            };
            let out = check(p, eta, stats, start)?;
            if !out.feasible {
                return Ok(None);
            }
            outs.push(out);
        }
        Ok(Some(outs))
    };

    while hi - lo > eps && eta_max > 0.0 {
        let mid = 0.5 * (lo + hi);
        stats.step += 1;
        match run(mid, stats, &warm)? {
            Some(outs) => {
                lo = mid;
                for (w, o) in warm.iter_mut().zip(&outs) {
                    *w = Some(o.powers.clone());
                }
                best = Some(outs);
            }
            None => hi = mid,
        }
    }
    let outs = match best {
        Some(o) => o,
        None => {
            stats.step += 1;
            run(0.0, stats, &vec![None; problems.len()])?
                .ok_or_else(|| Error::Domain("zero target reported infeasible".into()))?
        }
    };

    let mut powers = PowerAllocation::zeros(scenario.num_devices());
    let mut orders = Vec::new();
    for (p, o) in problems.iter().zip(outs) {
        p.scatter(&o.powers, &mut powers);
        orders.extend(o.orders);
    }
    Solution::evaluate(scenario, allocation, orders, powers)
}

/// Bisection on the MCOR with the alternating power/order heuristic as the
/// per-server feasibility check.
pub fn bisection_mcor(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    mode: SplitMode,
    stats: &mut SolverStats,
) -> Result<Solution> {
    let check = |p: &GroupProblem, eta: f64, st: &mut SolverStats, start: Option<&[f64]>| {
        alternating_power_order(p, eta, settings, st, start)
    };
    bisection_with(scenario, allocation, settings, mode, stats, &check)
}

/// Maximizes a sum-rate or proportional-fair utility server by server with
/// the same SCA / order-alternation skeleton, then applies the closed-form
/// schedule.
pub fn utility_solution(
    scenario: &Scenario,
    allocation: &Allocation,
    utility: Utility,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<Solution> {
    settings.validate()?;
    allocation.validate()?;
    let mut powers = PowerAllocation::zeros(scenario.num_devices());
    let mut all_orders = Vec::new();
    for m in 0..scenario.num_servers() {
        let problem = GroupProblem::new(scenario, allocation, m, SplitMode::Rsma);
        if problem.is_empty() {
            continue;
        }
        let (p, o) = alternating_utility(&problem, utility, settings, stats)?;
        problem.scatter(&p, &mut powers);
        all_orders.extend(o);
    }
    Solution::evaluate(scenario, allocation, all_orders, powers)
}

/// Order alternation for a general utility; keeps the best round.
pub fn alternating_utility(
    problem: &GroupProblem,
    utility: Utility,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<(Vec<f64>, Vec<GroupOrder>)> {
    let mut orders = init_decoding_order(problem);
    let mut best: Option<(f64, Vec<f64>, Vec<GroupOrder>)> = None;
    let mut carry: Option<Vec<f64>> = None;
    for round in 0..settings.alt_max_iters {
        let from = if settings.carry_powers {
            carry.as_deref()
        } else {
            None
        };
        let sca = sca_ascend(problem, &orders, utility, settings, from, None)?;
        stats.record(problem, f64::NAN, round, &sca, f64::INFINITY);
        if best.as_ref().map_or(true, |b| sca.objective > b.0) {
            best = Some((sca.objective, sca.powers.clone(), orders.clone()));
        }
        let next = order_from_powers(problem, &sca.powers);
        if next == orders {
            break;
        }
        orders = next;
        carry = Some(sca.powers);
    }
    let (_, p, o) = best.expect("at least one round");
    Ok((p, o))
}
