use super::CutError;

pub const PROB_EPS: f64 = 1e-6;

/// Mean self-attention between every pixel and the seed set:
/// `r(p) = (1/|B|) * sum_b a_s(p, b)`.
pub fn refine_map(a_s: &[f64], n: usize, seeds: &[usize]) -> Result<Vec<f64>, CutError> {
    if seeds.is_empty() {
        return Err(CutError::EmptySeeds);
    }
    if a_s.len() != n * n {
        return Err(CutError::DimMismatch(format!(
            "self-attention has {} entries, expected {}",
            a_s.len(),
            n * n
        )));
    }
    let inv = 1.0 / seeds.len() as f64;
    Ok((0..n)
        .map(|p| {
            let row = &a_s[p * n..(p + 1) * n];
            seeds.iter().map(|&b| row[b]).sum::<f64>() * inv
        })
        .collect())
}

/// Per-pixel unary costs of the two labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessField {
    pub width: usize,
    pub height: usize,
    /// Foreground probability, strictly inside (0, 1).
    pub s: Vec<f64>,
    /// `-ln s`
    pub cost_fg: Vec<f64>,
    /// `-ln (1 - s)`
    pub cost_bg: Vec<f64>,
    pub lambda_phi: f64,
}

impl ObjectnessField {
    /// Build from a probability map, clamping into `[eps, 1 - eps]`.
    pub fn from_probability(width: usize, height: usize, raw: &[f64], lambda_phi: f64) -> Self {
        let s: Vec<f64> = raw.iter().map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
        Self {
            width,
            height,
            cost_fg: s.iter().map(|v| -v.ln()).collect(),
            cost_bg: s.iter().map(|v| -(1.0 - v).ln()).collect(),
            s,
            lambda_phi,
        }
    }

    /// Build directly from costs; `s` is recovered as `exp(-cost_fg)`.
    pub fn from_costs(width: usize, height: usize, cost_fg: Vec<f64>, cost_bg: Vec<f64>) -> Self {
        assert_eq!(cost_fg.len(), width * height);
        assert_eq!(cost_bg.len(), width * height);
        Self {
            width,
            height,
            s: cost_fg.iter().map(|c| (-c).exp()).collect(),
            cost_fg,
            cost_bg,
            lambda_phi: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// `s = clamp(a_c + lambda_phi * r, eps, 1 - eps)` with the standard
/// graph-cut unaries `-ln s` and `-ln (1 - s)`.
pub fn objectness(
    a_c: &[f64],
    r: &[f64],
    width: usize,
    height: usize,
    lambda_phi: f64,
) -> Result<ObjectnessField, CutError> {
    if a_c.len() != width * height || r.len() != a_c.len() {
        return Err(CutError::DimMismatch(format!(
            "a_c has {} pixels, r has {}, grid is {width}x{height}",
            a_c.len(),
            r.len()
        )));
    }
    if lambda_phi < 0.0 {
        return Err(CutError::InvalidParam("lambda_phi must be non-negative".into()));
    }
    let raw: Vec<f64> = a_c.iter().zip(r).map(|(a, r)| a + lambda_phi * r).collect();
    Ok(ObjectnessField::from_probability(width, height, &raw, lambda_phi))
}
