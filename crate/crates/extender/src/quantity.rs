//! Kubernetes resource quantity strings.

use crate::ExtenderError;

fn split(q: &str) -> (&str, &str) {
    let q = q.trim();
    let at = q.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(q.len());
    q.split_at(at)
}

fn number(s: &str, whole: &str) -> Result<f64, ExtenderError> {
    let v: f64 = s.parse().map_err(|_| ExtenderError::BadRequest(format!("bad quantity {whole:?}")))?;
    if !v.is_finite() || v < 0.0 {
        return Err(ExtenderError::BadRequest(format!("bad quantity {whole:?}")));
    }
    Ok(v)
}

/// CPU quantity to milli-cores, rounded up.
pub fn cpu_millis(q: &str) -> Result<u64, ExtenderError> {
    let (n, unit) = split(q);
    let v = number(n, q)?;
    let m = match unit {
        "" => v * 1000.0,
        "m" => v,
        "n" => v / 1e6,
        "u" => v / 1e3,
        _ => return Err(ExtenderError::BadRequest(format!("bad cpu unit in {q:?}"))),
    };
    Ok(m.ceil() as u64)
}

/// Memory quantity to MiB, rounded up.
pub fn mem_mib(q: &str) -> Result<u64, ExtenderError> {
    let (n, unit) = split(q);
    let v = number(n, q)?;
    let bytes = match unit {
        "" => v,
        "k" => v * 1e3,
        "M" => v * 1e6,
        "G" => v * 1e9,
        "T" => v * 1e12,
        "Ki" => v * 1024.0,
        "Mi" => v * 1048576.0,
        "Gi" => v * 1073741824.0,
        "Ti" => v * 1099511627776.0,
        _ => return Err(ExtenderError::BadRequest(format!("bad memory unit in {q:?}"))),
    };
    Ok((bytes / 1048576.0).ceil() as u64)
}
