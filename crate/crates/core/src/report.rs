//! Flat `key=value` report blocks and number formatting for CSV output.

use std::fmt;

/// `x` with `digits` significant digits, trailing zeros trimmed (`%.{digits}g`).
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    let exp = x.abs().log10().floor() as i32;
    // rounding may carry into the next decade
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, e) = sci.split_once('e').unwrap();
    let e: i32 = e.parse().unwrap();
    let exp = if e != exp { e } else { exp };
    if exp < -5 || exp >= digits as i32 {
        return format!("{}e{}", trim_zeros(mantissa), exp);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Ordered `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    /// Floats are written with their shortest round-trip representation.
    pub fn num(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.push(key, format!("{value:?}"))
    }

    pub fn extend(&mut self, other: &KeyValues) -> &mut Self {
        self.entries.extend(other.entries.iter().cloned());
        self
    }

    /// Entries of `other` with `prefix.` prepended to each key.
    pub fn nest(&mut self, prefix: &str, other: &KeyValues) -> &mut Self {
        for (k, v) in &other.entries {
            self.entries.push((format!("{prefix}.{k}"), v.clone()));
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Types that serialize to a flat key-value block.
pub trait ToKeyValues {
    fn to_key_values(&self) -> KeyValues;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.1, 12), "0.1");
        assert_eq!(fmt_sig(0.1 + 0.2, 12), "0.3");
        assert_eq!(fmt_sig(-2.5, 12), "-2.5");
        assert_eq!(fmt_sig(123456.0, 3), "1.23e5");
        assert_eq!(fmt_sig(1e-7, 12), "1e-7");
        assert_eq!(fmt_sig(9.9999999999999, 12), "10");
        assert_eq!(fmt_sig(500.0, 12), "500");
    }

    #[test]
    fn key_value_block() {
        let mut kv = KeyValues::new();
        kv.num("z", 0.5).push("pass", true);
        assert_eq!(kv.to_string(), "z=0.5\npass=true\n");
        assert_eq!(kv.get("pass"), Some("true"));
    }
}
