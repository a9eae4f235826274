//! Scorer protocol v1: one UTF-8 JSON object per line.
//!
//! ```text
//! {"type":"hello","version":1,"classes":[...]}        scorer -> client, first line
//! {"type":"score","id":N,"image":"<base64 PNG>"}      client -> scorer
//! {"type":"probs","id":N,"probs":[...]}               scorer -> client
//! {"type":"error","id":N,"message":"..."}             scorer -> client
//! ```
//!
//! Scorers must be deterministic: the same image always yields the same
//! probabilities.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello { version: u32, classes: Vec<String> },
    Score { id: u64, image: String },
    Probs { id: u64, probs: Vec<f64> },
    Error { id: Option<u64>, message: String },
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("protocol messages always serialize");
        line.push('\n');
        line
    }
}

/// Base64 (standard alphabet, padded) of the PNG encoding of `image`.
pub fn encode_image(image: &RgbImage) -> String {
    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    STANDARD.encode(png)
}

pub fn decode_image(text: &str) -> Result<RgbImage, String> {
    let bytes = STANDARD.decode(text).map_err(|e| format!("invalid base64: {e}"))?;
    let img = image::load_from_memory(&bytes).map_err(|e| format!("invalid image: {e}"))?;
    Ok(img.to_rgb8())
}
