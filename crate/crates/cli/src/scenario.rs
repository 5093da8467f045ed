//! Time series of load and PV multipliers at one-minute resolution.

use std::io::{Read, Write};

use cvr_core::powerflow::Multipliers;
use cvr_core::CvrError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const MINUTES_PER_DAY: usize = 1440;

/// Global multipliers applied to every bus load and every inverter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTimeSeries {
    pub timestamps: Vec<usize>,
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
    pub pv: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    minute: usize,
    load_p: f64,
    load_q: f64,
    pv: f64,
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((h - center) / width).powi(2)).exp()
}

/// Noise-free daily load shape: overnight trough, a morning peak near
/// 08:00 and the daily peak near 19:30, scaled so the maximum is 1.
pub fn load_shape(minute: usize) -> f64 {
    let raw = |m: usize| {
        let h = m as f64 / 60.0;
        0.42 + 0.30 * bump(h, 8.0, 1.5) + 0.12 * bump(h, 13.0, 3.0) + 0.58 * bump(h, 19.5, 2.0)
    };
    let peak = (0..MINUTES_PER_DAY).map(raw).fold(0.0, f64::max);
    raw(minute % MINUTES_PER_DAY) / peak
}

/// Clear-sky PV shape between 06:00 and 19:00, peaking at 1 at 12:30.
pub fn pv_shape(minute: usize) -> f64 {
    let h = (minute % MINUTES_PER_DAY) as f64 / 60.0;
    if h <= 6.0 || h >= 19.0 {
        return 0.0;
    }
    (std::f64::consts::PI * (h - 6.0) / 13.0).sin().powf(1.5)
}

impl ScenarioTimeSeries {
    /// The bundled synthetic day. `load_noise` and `pv_noise` are the
    /// standard deviations of AR(1) fluctuations around the shapes.
    pub fn daily(seed: u64, load_noise: f64, pv_noise: f64) -> Result<Self, CvrError> {
        let bad = |e: rand_distr::NormalError| CvrError::Config(format!("scenario noise: {e}"));
        let nl = Normal::new(0.0, load_noise).map_err(bad)?;
        let np = Normal::new(0.0, pv_noise).map_err(bad)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut el, mut ep) = (0.0, 0.0);
        let mut s = ScenarioTimeSeries { timestamps: Vec::new(), load_p: Vec::new(), load_q: Vec::new(), pv: Vec::new() };
        for m in 0..MINUTES_PER_DAY {
            el = 0.9 * el + nl.sample(&mut rng);
            ep = 0.8 * ep + np.sample(&mut rng);
            let load = (load_shape(m) * (1.0 + el)).max(0.0);
            let pv = if pv_shape(m) > 0.0 { (pv_shape(m) * (1.0 + ep)).clamp(0.0, 1.0) } else { 0.0 };
            s.timestamps.push(m);
            s.load_p.push(load);
            s.load_q.push(load);
            s.pv.push(pv);
        }
        Ok(s)
    }

    /// Constant multipliers for `steps` minutes.
    pub fn constant(mult: Multipliers, steps: usize) -> Self {
        ScenarioTimeSeries {
            timestamps: (0..steps).collect(),
            load_p: vec![mult.load_p; steps],
            load_q: vec![mult.load_q; steps],
            pv: vec![mult.pv; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn check(&self) -> Result<(), CvrError> {
        let n = self.timestamps.len();
        if self.load_p.len() != n || self.load_q.len() != n || self.pv.len() != n {
            return Err(CvrError::Config("scenario series lengths differ".into()));
        }
        let all = self.load_p.iter().chain(&self.load_q).chain(&self.pv);
        if all.clone().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CvrError::Config("scenario multipliers must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn multipliers(&self, step: usize) -> Multipliers {
        Multipliers { load_p: self.load_p[step], load_q: self.load_q[step], pv: self.pv[step] }
    }

    /// Steps `start..start + len`, clipped to the series.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.len());
        let start = start.min(end);
        ScenarioTimeSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            load_p: self.load_p[start..end].to_vec(),
            load_q: self.load_q[start..end].to_vec(),
            pv: self.pv[start..end].to_vec(),
        }
    }

    /// CSV with columns `minute,load_p,load_q,pv`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(["minute", "load_p", "load_q", "pv"])?;
        for i in 0..self.len() {
            out.serialize(Row { minute: self.timestamps[i], load_p: self.load_p[i], load_q: self.load_q[i], pv: self.pv[i] })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, CvrError> {
        let mut s = ScenarioTimeSeries { timestamps: Vec::new(), load_p: Vec::new(), load_q: Vec::new(), pv: Vec::new() };
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row.map_err(|e| CvrError::Parse(e.to_string()))?;
            s.timestamps.push(row.minute);
            s.load_p.push(row.load_p);
            s.load_q.push(row.load_q);
            s.pv.push(row.pv);
        }
        s.check()?;
        Ok(s)
    }
}
