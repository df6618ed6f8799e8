use std::collections::HashSet;
use std::f64::consts::PI;

use crate::error::{data_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub name: String,
    /// Unit vector; +z points to the top of the head.
    pub position: [f64; 3],
}

/// Ordered electrode positions on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeMontage {
    electrodes: Vec<Electrode>,
}

impl ElectrodeMontage {
    /// Normalises each position to unit length and checks that names are
    /// unique.
    pub fn new(electrodes: Vec<(String, [f64; 3])>) -> Result<Self> {
        if electrodes.is_empty() {
            return Err(data_err!("montage has no electrodes"));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(electrodes.len());
        for (name, p) in electrodes {
            if !seen.insert(name.clone()) {
                return Err(data_err!("duplicate electrode name {name:?}"));
            }
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(data_err!("electrode {name:?} has a degenerate position {p:?}"));
            }
            out.push(Electrode { name, position: [p[0] / norm, p[1] / norm, p[2] / norm] });
        }
        Ok(Self { electrodes: out })
    }

    /// Parses `name x y z` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut electrodes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(data_err!("montage line {}: expected `name x y z`", lineno + 1));
            }
            let mut p = [0.0; 3];
            for (k, f) in fields[1..].iter().enumerate() {
                p[k] = f
                    .parse()
                    .map_err(|_| data_err!("montage line {}: bad coordinate {f:?}", lineno + 1))?;
            }
            electrodes.push((fields[0].to_string(), p));
        }
        Self::new(electrodes)
    }

    pub fn to_text(&self) -> String {
        self.electrodes
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.name, e.position[0], e.position[1], e.position[2]))
            .collect()
    }

    /// 64 electrodes on rings of fixed angular distance from the vertex,
    /// named `E01`..`E64`.
    pub fn standard_64() -> Self {
        // (polar angle in degrees, electrodes on the ring)
        const RINGS: [(f64, usize); 6] = [(0.0, 1), (23.0, 6), (46.0, 12), (69.0, 18), (92.0, 20), (112.0, 7)];
        let mut electrodes = Vec::with_capacity(64);
        for (ring, &(polar, count)) in RINGS.iter().enumerate() {
            let theta = polar.to_radians();
            let offset = if ring % 2 == 0 { 0.0 } else { PI / count as f64 };
            for k in 0..count {
                let phi = offset + 2.0 * PI * k as f64 / count as f64;
                let p = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                electrodes.push((format!("E{:02}", electrodes.len() + 1), p));
            }
        }
        Self::new(electrodes).expect("built-in montage is valid")
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    /// Same electrodes, reordered so that entry `i` is old entry `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self { electrodes: order.iter().map(|&i| self.electrodes[i].clone()).collect() }
    }
}
