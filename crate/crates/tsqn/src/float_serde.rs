//! JSON-safe encoding for floats that may be infinite.
//!
//! JSON has no literal for infinities, so threshold fields serialize finite
//! values as numbers and infinite ones as the strings "inf" / "-inf".

use serde::de::{self, Deserializer, Unexpected};
use serde::ser::Serializer;
use serde::Deserialize;

pub fn serialize<S: Serializer>(v: &f64, ser: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        ser.serialize_f64(*v)
    } else if *v == f64::INFINITY {
        ser.serialize_str("inf")
    } else if *v == f64::NEG_INFINITY {
        ser.serialize_str("-inf")
    } else {
        Err(serde::ser::Error::custom("NaN is not serializable"))
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(de)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(s) => match s.trim() {
            "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
            "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(de::Error::invalid_value(
                Unexpected::Str(other),
                &"a number or \"inf\"/\"-inf\"",
            )),
        },
    }
}
