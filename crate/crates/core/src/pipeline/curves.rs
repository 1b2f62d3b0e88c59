use std::path::Path;

use crate::curve::CurvePoint;
use crate::error::{Error, Result};

/// C `%.9g`: nine significant digits, trailing zeros dropped.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn curves_csv(curve: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map(format_g9).unwrap_or_default();
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.epoch,
            format_g9(p.train_loss),
            format_g9(p.train_accuracy),
            opt(p.val_loss),
            opt(p.val_accuracy)
        ));
    }
    out
}

pub fn export_curves(curve: &[CurvePoint], path: &Path) -> Result<()> {
    std::fs::write(path, curves_csv(curve)).map_err(|e| Error::io(path, e))
}
