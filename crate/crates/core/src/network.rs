//! The miniature encoder/decoder family: one shared time-conditioned
//! encoder, three structurally identical decoders, EMA teacher copies, the
//! diffusion schedule with its DDIM sampler, and the correlation feature
//! head.
//!
//! The encoder's first convolution always sees `classes + 1` input channels:
//! the diffusion flow feeds `concat([y_t, x])`, the plain flows zero the
//! label channels (zero channels contribute nothing, so the encoder is
//! genuinely shared between the flows).

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    add_channel_bias, avgpool, concat_channels, conv3, conv_down, conv_head, flatten_spatial,
    leaky_relu, linear, mat_project, softmax_classes, Tape, Var, VarShape,
};
use crate::error::{Error, Result};
use crate::params::{ema_update, pool_factor, Init, ParamStore, StoreKey};
use crate::rng::SeedRng;
use crate::vol::{ClassVolume, Dims3, Volume};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NetConfig {
    pub classes: usize,
    /// Resolution levels; level s runs at 1/2^s scale.
    pub stages: usize,
    /// Channel width at full resolution; level s uses `base_width << s`.
    pub base_width: usize,
    /// Convolutions per encoder stage.
    pub convs_per_block: usize,
    pub time_embed_dim: usize,
    /// Channel dimension of the correlation projections e1/e2.
    pub dfeat: usize,
    /// Pooled-grid extent per axis for the correlation map.
    pub pool_target: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            classes: 3,
            stages: 3,
            base_width: 8,
            convs_per_block: 2,
            time_embed_dim: 32,
            dfeat: 16,
            pool_target: 8,
            leaky_slope: 0.01,
        }
    }
}

impl NetConfig {
    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.stages < 2 {
            return Err(Error::Config("stages must be >= 2".into()));
        }
        if self.base_width == 0 || self.convs_per_block == 0 || self.dfeat == 0 {
            return Err(Error::Config("zero-sized network dimension".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    fn check_dims(&self, dims: Dims3) -> Result<()> {
        let div = 1usize << (self.stages - 1);
        if !dims.divisible_by(div) {
            return Err(Error::Shape(format!(
                "dims {dims} not divisible by 2^{} for {} stages",
                self.stages - 1,
                self.stages
            )));
        }
        Ok(())
    }
}

/// The forward-process noise schedule: `alpha_bar[t]` for `t in 0..=t_count`
/// with `alpha_bar[0] = 1`, strictly positive and nonincreasing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiffusionSchedule {
    pub t_count: usize,
    pub alpha_bar: Vec<f64>,
    pub ddim_steps: usize,
}

impl DiffusionSchedule {
    /// Linear beta schedule from 1e-4 to 2e-2.
    pub fn linear(t_count: usize, ddim_steps: usize) -> Result<Self> {
        if t_count == 0 || ddim_steps == 0 || ddim_steps > t_count {
            return Err(Error::Config(format!(
                "invalid schedule: t_count={t_count} ddim_steps={ddim_steps}"
            )));
        }
        let beta_start = 1e-4;
        let beta_end = 2e-2;
        let mut alpha_bar = Vec::with_capacity(t_count + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_count {
            let beta = beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_count - 1).max(1) as f64;
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        let s = DiffusionSchedule {
            t_count,
            alpha_bar,
            ddim_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.t_count + 1 || self.alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at 1 with t_count+1 entries".into()));
        }
        for t in 1..self.alpha_bar.len() {
            if self.alpha_bar[t] <= 0.0 || self.alpha_bar[t] > self.alpha_bar[t - 1] {
                return Err(Error::Config("alpha_bar must stay positive and nonincreasing".into()));
            }
        }
        Ok(())
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Validation(format!("time step {t} out of range 0..={}", self.t_count)))
    }

    /// Descending DDIM time pairs `(t_cur, t_prev)` covering `t_count -> 0`.
    pub fn ddim_taus(&self) -> Vec<(usize, usize)> {
        let s = self.ddim_steps;
        let tau = |k: usize| -> usize { (self.t_count * k + s / 2) / s };
        (1..=s).rev().map(|k| (tau(k).max(1), tau(k - 1))).collect()
    }
}

/// Forward noising: `y_t = sqrt(a)*y0 + sqrt(1-a)*eps` with `a = alpha_bar[t]`.
///
/// `t` must satisfy `t < t_count`.
pub fn diffusion_forward(
    y0: &ClassVolume,
    t: usize,
    eps: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<ClassVolume> {
    if t >= schedule.t_count {
        return Err(Error::Validation(format!(
            "time step {t} out of range 0..{}",
            schedule.t_count
        )));
    }
    if eps.len() != y0.data.len() {
        return Err(Error::Shape(format!(
            "noise length {} vs label field {}",
            eps.len(),
            y0.data.len()
        )));
    }
    let a = schedule.alpha_bar_at(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = y0
        .data
        .iter()
        .zip(eps.iter())
        .map(|(y, e)| sa * y + sn * e)
        .collect();
    ClassVolume::from_vec(y0.classes, y0.dims, data)
}

// ---------------------------------------------------------------------------
// parameter layout
// ---------------------------------------------------------------------------

fn build_encoder(cfg: &NetConfig, rng: &mut SeedRng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Init { rng };
    let in_ch = cfg.classes + 1;
    for s in 0..cfg.stages {
        let w = cfg.width(s);
        for c in 0..cfg.convs_per_block {
            let ci = if s == 0 && c == 0 {
                in_ch
            } else {
                w
            };
            init.conv3(&mut store, &format!("enc.s{s}.c{c}"), ci, w);
        }
        init.linear(&mut store, &format!("enc.time{s}"), cfg.time_embed_dim, w);
        if s + 1 < cfg.stages {
            init.conv2(&mut store, &format!("enc.down{s}"), w, cfg.width(s + 1));
        }
    }
    store
}

fn build_decoder(cfg: &NetConfig, rng: &mut SeedRng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Init { rng };
    for s in (0..cfg.stages - 1).rev() {
        init.conv3(&mut store, &format!("dec.up{s}"), cfg.width(s + 1), cfg.width(s));
        init.conv3(&mut store, &format!("dec.merge{s}"), 2 * cfg.width(s), cfg.width(s));
    }
    init.conv1(&mut store, "dec.head", cfg.base_width, cfg.classes);
    store
}

fn build_correlation(cfg: &NetConfig, rng: &mut SeedRng) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Init { rng };
    let deep = cfg.width(cfg.stages - 1);
    init.linear(&mut store, "corr.e1", deep, cfg.dfeat);
    init.linear(&mut store, "corr.e2", deep, cfg.dfeat);
    store
}

/// All parameter sets: shared encoder, three decoders, correlation head, and
/// the two EMA teacher copies. Teachers are never visited by the optimizer.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: NetConfig,
    pub enc: ParamStore,
    pub dec_xi: ParamStore,
    pub dec_psi: ParamStore,
    pub dec_theta: ParamStore,
    pub corr: ParamStore,
    pub teacher_enc: ParamStore,
    pub teacher_dec_theta: ParamStore,
}

impl ModelBundle {
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<ModelBundle> {
        cfg.validate()?;
        let mut rng = SeedRng::new(seed).derive(0x6d6f64656c);
        let enc = build_encoder(cfg, &mut rng);
        let dec_xi = build_decoder(cfg, &mut rng);
        let dec_psi = build_decoder(cfg, &mut rng);
        let dec_theta = build_decoder(cfg, &mut rng);
        let corr = build_correlation(cfg, &mut rng);
        // teachers start as exact copies of their students
        let teacher_enc = enc.clone();
        let teacher_dec_theta = dec_theta.clone();
        Ok(ModelBundle {
            cfg: cfg.clone(),
            enc,
            dec_xi,
            dec_psi,
            dec_theta,
            corr,
            teacher_enc,
            teacher_dec_theta,
        })
    }

    pub fn student_store(&self, key: StoreKey) -> &ParamStore {
        match key {
            StoreKey::Encoder => &self.enc,
            StoreKey::DecoderXi => &self.dec_xi,
            StoreKey::DecoderPsi => &self.dec_psi,
            StoreKey::DecoderTheta => &self.dec_theta,
            StoreKey::Correlation => &self.corr,
        }
    }

    pub fn student_store_mut(&mut self, key: StoreKey) -> &mut ParamStore {
        match key {
            StoreKey::Encoder => &mut self.enc,
            StoreKey::DecoderXi => &mut self.dec_xi,
            StoreKey::DecoderPsi => &mut self.dec_psi,
            StoreKey::DecoderTheta => &mut self.dec_theta,
            StoreKey::Correlation => &mut self.corr,
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        StoreKey::ALL
            .iter()
            .map(|&k| self.student_store(k).param_count())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for key in StoreKey::ALL {
            self.student_store_mut(key).zero_grads();
        }
        self.teacher_enc.zero_grads();
        self.teacher_dec_theta.zero_grads();
    }

    /// EMA step for both tracked teacher sets.
    pub fn ema_update(&mut self, gamma: f64) -> Result<()> {
        ema_update(&self.enc, &mut self.teacher_enc, gamma)?;
        ema_update(&self.dec_theta, &mut self.teacher_dec_theta, gamma)
    }
}

// ---------------------------------------------------------------------------
// forwards
// ---------------------------------------------------------------------------

/// Which plain-flow decoder to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderChoice {
    Psi,
    Theta,
}

pub struct EncoderOut {
    /// Per-stage activations, full resolution first.
    pub skips: Vec<Var>,
    pub dims: Dims3,
}

impl EncoderOut {
    pub fn deepest(&self) -> &Var {
        self.skips.last().expect("encoder produced no stages")
    }
}

/// Sinusoidal embedding of a time step.
fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        e[2 * i] = arg.sin();
        e[2 * i + 1] = arg.cos();
    }
    e
}

fn param_pair(tape: &mut Tape, store: &ParamStore, key: StoreKey, name: &str) -> Result<(Var, Var)> {
    let wi = store
        .index_of(&format!("{name}.w"))
        .ok_or_else(|| Error::Runtime(format!("missing parameter {name}.w")))?;
    let bi = store
        .index_of(&format!("{name}.b"))
        .ok_or_else(|| Error::Runtime(format!("missing parameter {name}.b")))?;
    Ok((tape.param(store, key, wi), tape.param(store, key, bi)))
}

/// Runs the shared encoder. `label_channels` supplies the `y_t` half of the
/// diffusion input; plain flows leave it `None` (zeroed channels) and use
/// `t = 0`.
pub fn encoder_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    store: &ParamStore,
    key: StoreKey,
    image: &Volume,
    label_channels: Option<&ClassVolume>,
    t: usize,
) -> Result<EncoderOut> {
    cfg.check_dims(image.dims)?;
    let dims = image.dims;
    let n = dims.voxels();
    let k = cfg.classes;
    if let Some(y) = label_channels {
        if y.classes != k {
            return Err(Error::Shape(format!(
                "label channels {} != classes {k}",
                y.classes
            )));
        }
        if y.dims != dims {
            return Err(Error::Shape(format!("label dims {} vs image {dims}", y.dims)));
        }
    }
    // input = concat([y_t, x]); y_t zeroed for plain flows
    let mut input = vec![0.0; (k + 1) * n];
    if let Some(y) = label_channels {
        input[..k * n].copy_from_slice(&y.data);
    }
    input[k * n..].copy_from_slice(&image.data);
    let mut h = Var::constant(input, VarShape::Chan(k + 1, dims));

    let embed = Var::constant(time_embedding(t, cfg.time_embed_dim), VarShape::Vector(cfg.time_embed_dim));
    let mut skips = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        for c in 0..cfg.convs_per_block {
            let (w, b) = param_pair(tape, store, key, &format!("enc.s{s}.c{c}"))?;
            h = conv3(tape, &h, &w, &b)?;
            if c == 0 {
                let (tw, tb) = param_pair(tape, store, key, &format!("enc.time{s}"))?;
                let bias = linear(tape, &tw, &embed, &tb)?;
                h = add_channel_bias(tape, &h, &bias)?;
            }
            h = leaky_relu(tape, &h, cfg.leaky_slope);
        }
        skips.push(h.clone());
        if s + 1 < cfg.stages {
            let (dw, db) = param_pair(tape, store, key, &format!("enc.down{s}"))?;
            h = conv_down(tape, &h, &dw, &db)?;
            h = leaky_relu(tape, &h, cfg.leaky_slope);
        }
    }
    Ok(EncoderOut { skips, dims })
}

/// Runs one decoder over encoder features, producing class logits.
pub fn decoder_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    store: &ParamStore,
    key: StoreKey,
    enc: &EncoderOut,
) -> Result<Var> {
    let mut h = enc.deepest().clone();
    for s in (0..cfg.stages - 1).rev() {
        let up = crate::autodiff::upsample2(tape, &h);
        let (uw, ub) = param_pair(tape, store, key, &format!("dec.up{s}"))?;
        h = conv3(tape, &up, &uw, &ub)?;
        h = leaky_relu(tape, &h, cfg.leaky_slope);
        h = concat_channels(tape, &h, &enc.skips[s])?;
        let (mw, mb) = param_pair(tape, store, key, &format!("dec.merge{s}"))?;
        h = conv3(tape, &h, &mw, &mb)?;
        h = leaky_relu(tape, &h, cfg.leaky_slope);
    }
    let (hw, hb) = param_pair(tape, store, key, "dec.head")?;
    conv_head(tape, &h, &hw, &hb)
}

/// Diffusion flow: encoder on `concat([y_t, x])` at time `t`, then the
/// denoising decoder. Returns `(logits, encoder features)`.
pub fn forward_labeled_diffusion(
    tape: &mut Tape,
    bundle: &ModelBundle,
    x: &Volume,
    y_t: &ClassVolume,
    t: usize,
) -> Result<(Var, EncoderOut)> {
    let enc = encoder_forward(
        tape,
        &bundle.cfg,
        &bundle.enc,
        StoreKey::Encoder,
        x,
        Some(y_t),
        t,
    )?;
    let logits = decoder_forward(tape, &bundle.cfg, &bundle.dec_xi, StoreKey::DecoderXi, &enc)?;
    Ok((logits, enc))
}

/// Plain flow (no label channels, t = 0) through the chosen decoder.
/// `use_teacher` is only valid for the theta decoder and switches to the EMA
/// parameter copies.
pub fn forward_plain(
    tape: &mut Tape,
    bundle: &ModelBundle,
    x: &Volume,
    choice: DecoderChoice,
    use_teacher: bool,
) -> Result<(Var, EncoderOut)> {
    if use_teacher && choice == DecoderChoice::Psi {
        return Err(Error::Validation(
            "teacher forward is only defined for the theta decoder".into(),
        ));
    }
    let (enc_store, dec_store, dec_key) = match (choice, use_teacher) {
        (DecoderChoice::Psi, _) => (&bundle.enc, &bundle.dec_psi, StoreKey::DecoderPsi),
        (DecoderChoice::Theta, false) => (&bundle.enc, &bundle.dec_theta, StoreKey::DecoderTheta),
        (DecoderChoice::Theta, true) => (
            &bundle.teacher_enc,
            &bundle.teacher_dec_theta,
            StoreKey::DecoderTheta,
        ),
    };
    let enc = encoder_forward(tape, &bundle.cfg, enc_store, StoreKey::Encoder, x, None, 0)?;
    let logits = decoder_forward(tape, &bundle.cfg, dec_store, dec_key, &enc)?;
    Ok((logits, enc))
}

/// Deterministic DDIM sampling (eta = 0) of the diffusion flow, from pure
/// noise down to a clean class-probability estimate.
pub fn ddim_pseudo_predict(
    bundle: &ModelBundle,
    schedule: &DiffusionSchedule,
    x: &Volume,
    rng: &mut SeedRng,
) -> Result<ClassVolume> {
    let k = bundle.cfg.classes;
    let n = x.dims.voxels();
    let mut y = vec![0.0; k * n];
    rng.fill_standard_normal(&mut y);
    let mut final_logits: Option<Var> = None;
    for (t_cur, t_prev) in schedule.ddim_taus() {
        let mut tape = Tape::no_grad();
        let y_t = ClassVolume::from_vec(k, x.dims, y.clone())?;
        let (logits, _) = forward_labeled_diffusion(&mut tape, bundle, x, &y_t, t_cur)?;
        let y0_hat = softmax_classes(&mut tape, &logits);
        let a_cur = schedule.alpha_bar_at(t_cur)?;
        let a_prev = schedule.alpha_bar_at(t_prev)?;
        let (sa_c, sn_c) = (a_cur.sqrt(), (1.0 - a_cur).sqrt().max(1e-12));
        let (sa_p, sn_p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        for i in 0..y.len() {
            let eps_hat = (y[i] - sa_c * y0_hat.data[i]) / sn_c;
            y[i] = sa_p * y0_hat.data[i] + sn_p * eps_hat;
        }
        final_logits = Some(logits);
    }
    let logits = final_logits.ok_or_else(|| Error::Config("ddim_steps must be >= 1".into()))?;
    let mut tape = Tape::no_grad();
    Ok(softmax_classes(&mut tape, &logits).to_class_volume())
}

/// Projects pooled deepest encoder features through the two correlation
/// linears, producing `(dfeat, positions)` matrices e1 and e2.
pub fn correlation_features_from(
    tape: &mut Tape,
    cfg: &NetConfig,
    corr: &ParamStore,
    enc: &EncoderOut,
) -> Result<(Var, Var)> {
    let deepest = enc.deepest();
    let (_, ddims) = deepest.chan_parts();
    let f = pool_factor(ddims, cfg.pool_target);
    let pooled = avgpool(tape, deepest, f)?;
    let flat = flatten_spatial(&pooled);
    let (w1, b1) = param_pair(tape, corr, StoreKey::Correlation, "corr.e1")?;
    let (w2, b2) = param_pair(tape, corr, StoreKey::Correlation, "corr.e2")?;
    let e1 = mat_project(tape, &w1, &flat, &b1)?;
    let e2 = mat_project(tape, &w2, &flat, &b2)?;
    Ok((e1, e2))
}

/// Standalone correlation feature extraction from an input volume (student
/// encoder, plain flow).
pub fn correlation_features(tape: &mut Tape, bundle: &ModelBundle, x: &Volume) -> Result<(Var, Var)> {
    let enc = encoder_forward(tape, &bundle.cfg, &bundle.enc, StoreKey::Encoder, x, None, 0)?;
    correlation_features_from(tape, &bundle.cfg, &bundle.corr, &enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            classes: 2,
            stages: 2,
            base_width: 2,
            convs_per_block: 1,
            time_embed_dim: 8,
            dfeat: 4,
            pool_target: 4,
            ..NetConfig::default()
        }
    }

    fn rand_volume(dims: Dims3, seed: u64) -> Volume {
        let mut rng = SeedRng::new(seed);
        Volume {
            dims,
            data: (0..dims.voxels()).map(|_| rng.uniform()).collect(),
        }
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let s = DiffusionSchedule::linear(1000, 10).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar[t] > 0.0);
            assert!(s.alpha_bar[t] <= s.alpha_bar[t - 1]);
        }
        let taus = s.ddim_taus();
        assert_eq!(taus.len(), 10);
        assert_eq!(taus[0].0, 1000);
        assert_eq!(taus.last().unwrap().1, 0);
    }

    #[test]
    fn diffusion_forward_identity_at_t0() {
        let s = DiffusionSchedule::linear(100, 4).unwrap();
        let dims = Dims3::new(2, 2, 2);
        let mut y0 = ClassVolume::zeros(2, dims);
        y0.data[3] = 1.0;
        let eps = vec![0.7; y0.data.len()];
        // alpha_bar[0] = 1 -> y_t == y0
        let yt = diffusion_forward(&y0, 0, &eps, &s).unwrap();
        assert_eq!(yt.data, y0.data);
    }

    #[test]
    fn diffusion_forward_pure_noise_limit() {
        // handcrafted schedule hitting alpha_bar = 0 exercises the limit
        let s = DiffusionSchedule {
            t_count: 1,
            alpha_bar: vec![1.0, 0.0],
            ddim_steps: 1,
        };
        let dims = Dims3::new(2, 2, 2);
        let y0 = ClassVolume::from_vec(1, dims, vec![0.5; 8]).unwrap();
        let eps: Vec<f64> = (0..8).map(|i| i as f64).collect();
        // t must be < t_count, so use the custom entry at t=1 via a shifted
        // schedule: alpha_bar[1] = 0 is reachable with t_count = 2
        let s2 = DiffusionSchedule {
            t_count: 2,
            alpha_bar: vec![1.0, 0.0, 0.0],
            ddim_steps: 1,
        };
        let yt = diffusion_forward(&y0, 1, &eps, &s2).unwrap();
        assert_eq!(yt.data, eps);
        drop(s);
    }

    #[test]
    fn diffusion_forward_rejects_out_of_range_t() {
        let s = DiffusionSchedule::linear(10, 2).unwrap();
        let y0 = ClassVolume::zeros(1, Dims3::new(2, 2, 2));
        let eps = vec![0.0; 8];
        assert!(diffusion_forward(&y0, 10, &eps, &s).is_err());
        assert!(diffusion_forward(&y0, 9, &eps, &s).is_ok());
    }

    #[test]
    fn diffusion_forward_variance_statistic() {
        // y0 = 0, var(y_t) = 1 - alpha_bar[t]
        let s = DiffusionSchedule::linear(1000, 10).unwrap();
        let dims = Dims3::new(2, 2, 2);
        let y0 = ClassVolume::zeros(1, dims);
        let mut rng = SeedRng::new(77);
        for t in [250usize, 500, 850] {
            let expect = 1.0 - s.alpha_bar[t];
            let mut acc = 0.0;
            let mut count = 0usize;
            let mut eps = vec![0.0; 8];
            for _ in 0..1250 {
                rng.fill_standard_normal(&mut eps);
                let yt = diffusion_forward(&y0, t, &eps, &s).unwrap();
                for v in yt.data {
                    acc += v * v;
                    count += 1;
                }
            }
            let var = acc / count as f64;
            assert!(
                (var - expect).abs() < 0.05 * expect,
                "t={t}: var {var} vs {expect}"
            );
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let bundle = ModelBundle::init(&cfg, 5).unwrap();
        for extent in [4usize, 8] {
            let dims = Dims3::new(extent, extent, extent);
            let x = rand_volume(dims, extent as u64);
            let mut tape = Tape::no_grad();
            let (logits, _) = forward_plain(&mut tape, &bundle, &x, DecoderChoice::Theta, false).unwrap();
            assert_eq!(logits.shape, VarShape::Chan(2, dims));
            let mut tape2 = Tape::no_grad();
            let (logits2, _) =
                forward_plain(&mut tape2, &bundle, &x, DecoderChoice::Theta, false).unwrap();
            assert_eq!(logits.value(), logits2.value());
        }
    }

    #[test]
    fn teacher_matches_student_at_init() {
        let bundle = ModelBundle::init(&tiny_cfg(), 6).unwrap();
        let x = rand_volume(Dims3::new(8, 8, 8), 3);
        let mut tape = Tape::no_grad();
        let (s, _) = forward_plain(&mut tape, &bundle, &x, DecoderChoice::Theta, false).unwrap();
        let (t, _) = forward_plain(&mut tape, &bundle, &x, DecoderChoice::Theta, true).unwrap();
        assert_eq!(s.value(), t.value());
    }

    #[test]
    fn teacher_with_psi_rejected() {
        let bundle = ModelBundle::init(&tiny_cfg(), 6).unwrap();
        let x = rand_volume(Dims3::new(4, 4, 4), 3);
        let mut tape = Tape::no_grad();
        assert!(forward_plain(&mut tape, &bundle, &x, DecoderChoice::Psi, true).is_err());
    }

    #[test]
    fn shared_encoder_identical_features_across_flows() {
        // same inputs and t through psi-flow and theta-flow encoders
        let cfg = tiny_cfg();
        let bundle = ModelBundle::init(&cfg, 9).unwrap();
        let x = rand_volume(Dims3::new(8, 8, 8), 4);
        let mut tape = Tape::no_grad();
        let e1 = encoder_forward(&mut tape, &cfg, &bundle.enc, StoreKey::Encoder, &x, None, 0).unwrap();
        let e2 = encoder_forward(&mut tape, &cfg, &bundle.enc, StoreKey::Encoder, &x, None, 0).unwrap();
        for (a, b) in e1.skips.iter().zip(e2.skips.iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn zeroed_head_gives_zero_logits() {
        let cfg = tiny_cfg();
        let mut bundle = ModelBundle::init(&cfg, 8).unwrap();
        for name in ["dec.head.w", "dec.head.b"] {
            let e = bundle.dec_theta.by_name_mut(name).unwrap();
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = rand_volume(Dims3::new(4, 4, 4), 5);
        let mut tape = Tape::no_grad();
        let (logits, _) = forward_plain(&mut tape, &bundle, &x, DecoderChoice::Theta, false).unwrap();
        assert!(logits.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddim_output_is_normalized_and_deterministic() {
        let cfg = tiny_cfg();
        let bundle = ModelBundle::init(&cfg, 10).unwrap();
        let schedule = DiffusionSchedule::linear(100, 3).unwrap();
        let x = rand_volume(Dims3::new(4, 4, 4), 6);
        let p1 = ddim_pseudo_predict(&bundle, &schedule, &x, &mut SeedRng::new(42)).unwrap();
        assert!(p1.is_normalized(1e-5));
        let p2 = ddim_pseudo_predict(&bundle, &schedule, &x, &mut SeedRng::new(42)).unwrap();
        assert_eq!(p1.data, p2.data);
        // single-step sampling stays normalized
        let s1 = DiffusionSchedule::linear(100, 1).unwrap();
        let p3 = ddim_pseudo_predict(&bundle, &s1, &x, &mut SeedRng::new(42)).unwrap();
        assert!(p3.is_normalized(1e-5));
    }

    #[test]
    fn correlation_feature_shapes_and_pooling() {
        let cfg = tiny_cfg();
        let bundle = ModelBundle::init(&cfg, 11).unwrap();
        // stages=2 on 8^3 -> deepest 4^3 = 64 positions (pool_target 4)
        let x = rand_volume(Dims3::new(8, 8, 8), 7);
        let mut tape = Tape::no_grad();
        let (e1, e2) = correlation_features(&mut tape, &bundle, &x).unwrap();
        assert_eq!(e1.shape, VarShape::Mat(4, 64));
        assert_eq!(e2.shape, VarShape::Mat(4, 64));
        assert_ne!(e1.value(), e2.value());
        // 16^3 input pools 8^3 deepest down to 4^3
        let x = rand_volume(Dims3::new(16, 16, 16), 8);
        let mut tape = Tape::no_grad();
        let (e1, _) = correlation_features(&mut tape, &bundle, &x).unwrap();
        assert_eq!(e1.shape, VarShape::Mat(4, 64));
    }

    #[test]
    fn time_step_changes_diffusion_features() {
        let cfg = tiny_cfg();
        let bundle = ModelBundle::init(&cfg, 12).unwrap();
        let dims = Dims3::new(4, 4, 4);
        let x = rand_volume(dims, 9);
        let y_t = ClassVolume::zeros(2, dims);
        let mut tape = Tape::no_grad();
        let (a, _) = forward_labeled_diffusion(&mut tape, &bundle, &x, &y_t, 1).unwrap();
        let (b, _) = forward_labeled_diffusion(&mut tape, &bundle, &x, &y_t, 900).unwrap();
        assert_ne!(a.value(), b.value());
    }
}
