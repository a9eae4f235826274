//! Scorer side of the protocol, used by the fixture scorer binary and by
//! tests. Requests are answered sequentially in arrival order.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use image::RgbImage;

use rayon::prelude::*;

use super::protocol::{decode_image, Message, PROTOCOL_VERSION};
use super::{Scorer, ScorerError};

/// A deterministic image classifier that can sit behind the protocol.
pub trait ScoringModel: Send + Sync {
    fn classes(&self) -> Vec<String>;
    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>, String>;
}

impl<M: ScoringModel + ?Sized> ScoringModel for Arc<M> {
    fn classes(&self) -> Vec<String> {
        (**self).classes()
    }

    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>, String> {
        (**self).probabilities(image)
    }
}

fn answer(model: &dyn ScoringModel, line: &str) -> Message {
    let value: serde_json::Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return Message::Error {
                id: None,
                message: format!("malformed request: {e}"),
            }
        }
    };
    let id = value.get("id").and_then(|v| v.as_u64());
    match serde_json::from_value::<Message>(value) {
        Ok(Message::Score { id, image }) => {
            let outcome = decode_image(&image).and_then(|img| model.probabilities(&img));
            match outcome {
                Ok(probs) => Message::Probs { id, probs },
                Err(message) => Message::Error { id: Some(id), message },
            }
        }
        Ok(other) => Message::Error {
            id,
            message: format!("unexpected message type {:?}", type_name(&other)),
        },
        Err(e) => Message::Error {
            id,
            message: format!("malformed request: {e}"),
        },
    }
}

fn type_name(m: &Message) -> &'static str {
    match m {
        Message::Hello { .. } => "hello",
        Message::Score { .. } => "score",
        Message::Probs { .. } => "probs",
        Message::Error { .. } => "error",
    }
}

/// Sends the hello line, then answers one request line at a time until the
/// reader is exhausted. Blank lines are ignored.
pub fn serve<R: BufRead, W: Write>(model: &dyn ScoringModel, reader: R, mut writer: W) -> io::Result<()> {
    let hello = Message::Hello {
        version: PROTOCOL_VERSION,
        classes: model.classes(),
    };
    writer.write_all(hello.to_line().as_bytes())?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writer.write_all(answer(model, line.trim_end()).to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Serves `model` on an ephemeral localhost port, one thread per
/// connection. Returns the bound address.
pub fn spawn_tcp(model: Arc<dyn ScoringModel>) -> io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = thread::spawn(move || serve_listener(model, listener));
    Ok((addr, handle))
}

/// Accept loop for a bound listener; runs until the listener fails.
pub fn serve_listener(model: Arc<dyn ScoringModel>, listener: TcpListener) {
    for stream in listener.incoming() {
        let Ok(stream) = stream else { break };
        let model = Arc::clone(&model);
        thread::spawn(move || {
            let Ok(read_half) = stream.try_clone() else { return };
            if let Err(e) = serve(&*model, BufReader::new(read_half), stream) {
                log::debug!("scorer connection ended: {e}");
            }
        });
    }
}

/// Adapter that scores in process, without a protocol round trip.
#[derive(Debug, Clone)]
pub struct LocalScorer<M> {
    model: M,
    classes: Vec<String>,
}

impl<M: ScoringModel> LocalScorer<M> {
    pub fn new(model: M) -> Self {
        let classes = model.classes();
        LocalScorer { model, classes }
    }
}

impl<M: ScoringModel> Scorer for LocalScorer<M> {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn score_batch(&mut self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>, ScorerError> {
        images
            .par_iter()
            .map(|img| self.model.probabilities(img).map_err(|message| ScorerError::Remote { id: None, message }))
            .collect()
    }
}

/// Mock scorer: the probability of the first class is the mean image
/// brightness (all channels, scaled to `[0, 1]`); the remainder is split
/// evenly over the other classes.
#[derive(Debug, Clone)]
pub struct BrightnessModel {
    pub classes: Vec<String>,
}

impl BrightnessModel {
    pub fn with_classes(n: usize) -> Self {
        BrightnessModel {
            classes: (0..n).map(|i| format!("class_{i}")).collect(),
        }
    }

    pub fn brightness(image: &RgbImage) -> f64 {
        let raw = image.as_raw();
        raw.iter().map(|&v| f64::from(v)).sum::<f64>() / (raw.len() as f64 * 255.0)
    }
}

impl ScoringModel for BrightnessModel {
    fn classes(&self) -> Vec<String> {
        self.classes.clone()
    }

    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>, String> {
        let c = self.classes.len();
        if c < 2 {
            return Err("brightness model needs at least two classes".into());
        }
        let b = Self::brightness(image);
        let rest = (1.0 - b) / (c - 1) as f64;
        let mut probs = vec![rest; c];
        probs[0] = b;
        Ok(probs)
    }
}

/// Mock scorer that ignores its input.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    pub classes: Vec<String>,
    pub probs: Vec<f64>,
}

impl ScoringModel for ConstantModel {
    fn classes(&self) -> Vec<String> {
        self.classes.clone()
    }

    fn probabilities(&self, _image: &RgbImage) -> Result<Vec<f64>, String> {
        Ok(self.probs.clone())
    }
}
