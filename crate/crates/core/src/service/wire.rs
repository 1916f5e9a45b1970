//! Length-prefixed JSON frames.

use std::io::{Read, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest frame either side will accept.
pub const MAX_FRAME: usize = 256 << 20;

/// Significant decimal digits kept for every float crossing the boundary.
pub const WIRE_DIGITS: i32 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiRequest {
    pub request_id: String,
    /// Accounting label chosen by the caller.
    pub tag: String,
    /// `[n, height, width, channels]`.
    pub shape: [usize; 4],
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ApiResponse {
    Ok {
        request_id: String,
        probabilities: Vec<Vec<f64>>,
    },
    Err {
        request_id: String,
        error: String,
    },
}

impl ApiResponse {
    pub fn request_id(&self) -> &str {
        match self {
            ApiResponse::Ok { request_id, .. } | ApiResponse::Err { request_id, .. } => request_id,
        }
    }
}

/// Rounds to [`WIRE_DIGITS`] significant digits.
pub fn quantize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.abs().log10().floor() as i32;
    let shift = WIRE_DIGITS - 1 - exp;
    if (0..=22).contains(&shift) {
        let s = 10f64.powi(shift);
        (x * s).round() / s
    } else if (-22..0).contains(&shift) {
        let s = 10f64.powi(-shift);
        (x / s).round() * s
    } else {
        format!("{:.*e}", (WIRE_DIGITS - 1) as usize, x)
            .parse()
            .unwrap_or(x)
    }
}

pub fn quantize_all(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = quantize(*v));
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME {
        return Err(Error::Protocol(format!(
            "frame of {} bytes exceeds limit {MAX_FRAME}",
            body.len()
        )));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one raw frame body. `Ok(None)` on a clean end of stream.
pub fn read_frame_bytes<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {n} bytes exceeds limit {MAX_FRAME}")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_frame<R: Read, T: DeserializeOwned>(r: &mut R) -> Result<Option<T>> {
    match read_frame_bytes(r)? {
        Some(b) => Ok(Some(serde_json::from_slice(&b)?)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.123456789123), 0.123456789);
        assert_eq!(quantize(1.0), 1.0);
        assert_eq!(quantize(-2.5e-7), -2.5e-7);
        assert_eq!(quantize(1.23456789987e-30), 1.23456790e-30);
        assert_eq!(quantize(0.0), 0.0);
    }

    #[test]
    fn frames_round_trip() {
        let req = ApiRequest {
            request_id: "a-1".into(),
            tag: "beta".into(),
            shape: [1, 1, 2, 1],
            pixels: vec![quantize(0.1), quantize(1.0 / 3.0)],
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &req).unwrap();
        let back: ApiRequest = read_frame(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, req);
        assert!(read_frame::<_, ApiRequest>(&mut [].as_slice()).unwrap().is_none());
    }

    #[test]
    fn oversized_length_rejected() {
        let bytes = ((MAX_FRAME + 1) as u32).to_be_bytes();
        assert!(matches!(
            read_frame_bytes(&mut bytes.as_slice()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn response_variants_parse() {
        let ok: ApiResponse =
            serde_json::from_str(r#"{"request_id":"x","probabilities":[[0.5,0.5]]}"#).unwrap();
        assert!(matches!(ok, ApiResponse::Ok { .. }));
        let err: ApiResponse = serde_json::from_str(r#"{"request_id":"x","error":"no"}"#).unwrap();
        assert!(matches!(err, ApiResponse::Err { .. }));
    }

    proptest! {
        #[test]
        fn quantized_values_survive_json(x in -1e6f64..1e6) {
            let q = quantize(x);
            let back: f64 = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
            prop_assert_eq!(back.to_bits(), q.to_bits());
            prop_assert!((q - x).abs() <= 1e-8 * x.abs().max(1e-300));
            prop_assert_eq!(quantize(q), q);
        }
    }
}
