//! One event per line of `key=value` pairs. Values holding whitespace, `=`
//! or nothing at all are printed quoted.

pub fn emit(pairs: &[(&str, String)]) {
    let line: Vec<String> = pairs
        .iter()
        .map(|(k, v)| {
            if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '=' || c == '"') {
                format!("{k}={v:?}")
            } else {
                format!("{k}={v}")
            }
        })
        .collect();
    println!("{}", line.join(" "));
}

/// Fixed-precision float for logs.
pub fn f(v: f64) -> String {
    format!("{v:.6}")
}
