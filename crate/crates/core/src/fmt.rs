//! Number formatting shared by every CSV writer.

/// Nine significant digits in scientific notation, so files diff cleanly
/// across runs.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    format!("{x:.8e}")
}
