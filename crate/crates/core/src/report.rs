//! Canonical JSON emission for reports.
//!
//! Keys are sorted, floats use fixed 9-decimal formatting, and the writer
//! is pure, so identical report values serialize to identical bytes.

/// JSON value with deterministic serialization.
#[derive(Clone, Debug, PartialEq)]
pub enum JsonVal {
    Null,
    Bool(bool),
    Int(i64),
    UInt(u64),
    Num(f64),
    Str(String),
    Arr(Vec<JsonVal>),
    Obj(Vec<(String, JsonVal)>),
}

/// Round to the serialized precision, so aggregates computed from rounded
/// per-entry values reproduce exactly after a parse round-trip.
pub fn round9(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

impl JsonVal {
    pub fn obj(fields: Vec<(&str, JsonVal)>) -> JsonVal {
        JsonVal::Obj(
            fields
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }

    pub fn to_string_canonical(&self) -> String {
        let mut out = String::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut String) {
        match self {
            JsonVal::Null => out.push_str("null"),
            JsonVal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JsonVal::Int(i) => out.push_str(&i.to_string()),
            JsonVal::UInt(u) => out.push_str(&u.to_string()),
            JsonVal::Num(v) => {
                if v.is_finite() {
                    out.push_str(&format!("{:.9}", round9(*v)));
                } else {
                    out.push_str("null");
                }
            }
            JsonVal::Str(s) => write_escaped(s, out),
            JsonVal::Arr(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write(out);
                }
                out.push(']');
            }
            JsonVal::Obj(fields) => {
                let mut sorted: Vec<&(String, JsonVal)> = fields.iter().collect();
                sorted.sort_by(|a, b| a.0.cmp(&b.0));
                out.push('{');
                for (i, (k, v)) in sorted.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write_escaped(k, out);
                    out.push(':');
                    v.write(out);
                }
                out.push('}');
            }
        }
    }
}

fn write_escaped(s: &str, out: &mut String) {
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}
