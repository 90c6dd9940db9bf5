//! Named parameter stores, initialization, SGD, and the EMA teacher update.

use crate::autodiff::VarShape;
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::vol::Dims3;

/// Which trainable store a tape leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreKey {
    Encoder,
    DecoderXi,
    DecoderPsi,
    DecoderTheta,
    Correlation,
}

impl StoreKey {
    pub const ALL: [StoreKey; 5] = [
        StoreKey::Encoder,
        StoreKey::DecoderXi,
        StoreKey::DecoderPsi,
        StoreKey::DecoderTheta,
        StoreKey::Correlation,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            StoreKey::Encoder => "enc",
            StoreKey::DecoderXi => "dec_xi",
            StoreKey::DecoderPsi => "dec_psi",
            StoreKey::DecoderTheta => "dec_theta",
            StoreKey::Correlation => "corr",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    /// SGD momentum buffer (unused on teacher stores).
    pub mom: Vec<f64>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Maps the stored shape onto a tape shape. Weights are kept flat; the
    /// consuming op knows its own layout.
    pub fn var_shape(&self) -> VarShape {
        match self.shape.as_slice() {
            [r, c] => VarShape::Mat(*r, *c),
            [n] => VarShape::Vector(*n),
            _ => VarShape::Vector(self.data.len()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            grad: vec![0.0; n],
            mom: vec![0.0; n],
            data,
        });
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.entries.iter().all(|e| e.grad.iter().all(|&g| g == 0.0))
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }

    fn check_same_structure(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .iter()
                .zip(other.entries.iter())
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::Validation(
                "parameter store structures do not match".into(),
            ));
        }
        Ok(())
    }
}

/// He-normal initialization helpers, all driven by one rng stream so the
/// bundle layout is reproducible from a seed.
pub struct Init<'a> {
    pub rng: &'a mut SeedRng,
}

impl<'a> Init<'a> {
    pub fn conv3(&mut self, store: &mut ParamStore, name: &str, ci: usize, co: usize) {
        self.conv(store, name, ci, co, 27)
    }

    pub fn conv2(&mut self, store: &mut ParamStore, name: &str, ci: usize, co: usize) {
        self.conv(store, name, ci, co, 8)
    }

    pub fn conv1(&mut self, store: &mut ParamStore, name: &str, ci: usize, co: usize) {
        self.conv(store, name, ci, co, 1)
    }

    fn conv(&mut self, store: &mut ParamStore, name: &str, ci: usize, co: usize, ksize: usize) {
        let fan_in = (ci * ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..co * ci * ksize)
            .map(|_| self.rng.standard_normal() * std)
            .collect();
        store.add(&format!("{name}.w"), vec![co * ci * ksize], w);
        store.add(&format!("{name}.b"), vec![co], vec![0.0; co]);
    }

    pub fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_out * fan_in)
            .map(|_| self.rng.standard_normal() * std)
            .collect();
        store.add(&format!("{name}.w"), vec![fan_out, fan_in], w);
        store.add(&format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]);
    }
}

/// Classic SGD with momentum and decoupled-from-nothing weight decay:
/// `v = mu*v + (g + wd*p); p -= lr*v`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

pub fn sgd_step(store: &mut ParamStore, lr: f64, cfg: SgdConfig) {
    for e in &mut store.entries {
        for i in 0..e.data.len() {
            let g = e.grad[i] + cfg.weight_decay * e.data[i];
            e.mom[i] = cfg.momentum * e.mom[i] + g;
            e.data[i] -= lr * e.mom[i];
        }
    }
}

/// EMA teacher update: every teacher parameter becomes
/// `gamma * teacher + (1 - gamma) * student`.
pub fn ema_update(student: &ParamStore, teacher: &mut ParamStore, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Validation(format!(
            "ema gamma {gamma} outside [0, 1]"
        )));
    }
    teacher.check_same_structure(student)?;
    for (t, s) in teacher.entries.iter_mut().zip(student.entries.iter()) {
        for (tv, sv) in t.data.iter_mut().zip(s.data.iter()) {
            *tv = gamma * *tv + (1.0 - gamma) * sv;
        }
    }
    Ok(())
}

/// Shared helper for modules that need the pooled-grid factor of a volume.
pub fn pool_factor(dims: Dims3, target: usize) -> usize {
    let m = dims.l.min(dims.w).min(dims.h);
    if m <= target {
        1
    } else {
        m / target
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", vec![4], vec![value; 4]);
        s
    }

    #[test]
    fn ema_gamma_one_keeps_teacher() {
        let student = store_with(5.0);
        let mut teacher = store_with(1.0);
        ema_update(&student, &mut teacher, 1.0).unwrap();
        assert_eq!(teacher.entries[0].data, vec![1.0; 4]);
    }

    #[test]
    fn ema_gamma_zero_copies_student() {
        let student = store_with(5.0);
        let mut teacher = store_with(1.0);
        ema_update(&student, &mut teacher, 0.0).unwrap();
        assert_eq!(teacher.entries[0].data, vec![5.0; 4]);
    }

    #[test]
    fn ema_geometric_series() {
        // constant student c, teacher starts at 0: after n updates
        // teacher = c * (1 - gamma^n)
        let c = 3.0;
        let gamma = 0.9_f64;
        let student = store_with(c);
        let mut teacher = store_with(0.0);
        for n in 1..=40 {
            ema_update(&student, &mut teacher, gamma).unwrap();
            let expect = c * (1.0 - gamma.powi(n));
            for &v in &teacher.entries[0].data {
                assert!((v - expect).abs() < 1e-9, "n={n} v={v} expect={expect}");
            }
        }
    }

    #[test]
    fn ema_teacher_stays_in_student_history_hull() {
        use crate::rng::SeedRng;
        let mut rng = SeedRng::new(6);
        let mut teacher = store_with(0.4);
        let mut lo = 0.4f64;
        let mut hi = 0.4f64;
        for _ in 0..50 {
            let v = rng.uniform_range(-2.0, 2.0);
            lo = lo.min(v);
            hi = hi.max(v);
            let student = store_with(v);
            ema_update(&student, &mut teacher, 0.95).unwrap();
            for &t in &teacher.entries[0].data {
                assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ema_rejects_structure_mismatch() {
        let student = store_with(1.0);
        let mut teacher = ParamStore::new();
        teacher.add("q", vec![4], vec![0.0; 4]);
        assert!(ema_update(&student, &mut teacher, 0.5).is_err());
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut s = store_with(1.0);
        s.entries[0].grad = vec![0.5; 4];
        sgd_step(
            &mut s,
            0.1,
            SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        assert_eq!(s.entries[0].data, vec![0.95; 4]);
    }
}
