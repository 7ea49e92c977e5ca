//! Pluggable crop classifiers: an IoU oracle for tests and a client for an
//! external classification service speaking newline-delimited JSON.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageId;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// One classification request: the pixels plus where they came from.
#[derive(Debug, Clone, Copy)]
pub struct CropInput<'a> {
    pub image_id: ImageId,
    /// Region of the source image the pixels were cut from.
    pub region: BoundingBox,
    pub pixels: &'a RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: String,
    pub confidence: f64,
}

pub trait ClassifierClient {
    fn classify(&mut self, input: &CropInput<'_>) -> Result<Classification>;
}

/// Label returned by the oracle when the crop misses the object.
pub const ORACLE_MISS: &str = "__background__";

/// Answers the true label iff the crop region overlaps the image's
/// ground-truth box with IoU at or above the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct IouOracle {
    pub truths: BTreeMap<ImageId, (BoundingBox, String)>,
    pub threshold: f64,
}

impl IouOracle {
    pub fn new(truths: BTreeMap<ImageId, (BoundingBox, String)>) -> Self {
        Self {
            truths,
            threshold: 0.5,
        }
    }
}

impl ClassifierClient for IouOracle {
    fn classify(&mut self, input: &CropInput<'_>) -> Result<Classification> {
        let (b, label) = self.truths.get(&input.image_id).ok_or_else(|| {
            Error::Data(format!("oracle has no truth for image {}", input.image_id))
        })?;
        let overlap = iou(&input.region, b);
        Ok(if overlap >= self.threshold {
            Classification {
                label: label.clone(),
                confidence: overlap,
            }
        } else {
            Classification {
                label: ORACLE_MISS.to_string(),
                confidence: 1.0 - overlap,
            }
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    /// Base64-encoded PNG.
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub label: String,
    pub confidence: f64,
}

pub fn encode_png(img: &RgbImage) -> Result<String> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(BASE64.encode(buf.into_inner()))
}

pub fn decode_png(data: &str) -> Result<RgbImage> {
    let bytes = BASE64
        .decode(data)
        .map_err(|e| Error::Transport(format!("bad base64 image: {e}")))?;
    Ok(image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8())
}

/// Client for a classification service on a local TCP socket. One JSON
/// request per line, answered by one JSON response per line with the same id.
#[derive(Debug)]
pub struct SocketClassifier {
    pub addr: String,
    pub timeout: Duration,
    conn: Option<BufReader<TcpStream>>,
    next_id: u64,
}

impl SocketClassifier {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(30),
            conn: None,
            next_id: 1,
        }
    }

    fn connection(&mut self) -> Result<&mut BufReader<TcpStream>> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.addr)
                .map_err(|e| Error::Transport(format!("cannot connect to {}: {e}", self.addr)))?;
            stream
                .set_read_timeout(Some(self.timeout))
                .map_err(|e| Error::Transport(e.to_string()))?;
            stream
                .set_write_timeout(Some(self.timeout))
                .map_err(|e| Error::Transport(e.to_string()))?;
            self.conn = Some(BufReader::new(stream));
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }

    fn exchange(&mut self, request: &WireRequest) -> Result<WireResponse> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        let conn = self.connection()?;
        conn.get_mut()
            .write_all(line.as_bytes())
            .map_err(|e| Error::Transport(format!("send failed: {e}")))?;
        let mut reply = String::new();
        let n = conn
            .read_line(&mut reply)
            .map_err(|e| Error::Transport(format!("receive failed: {e}")))?;
        if n == 0 {
            return Err(Error::Transport("classifier closed the connection".into()));
        }
        let resp: WireResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
        if resp.id != request.id {
            return Err(Error::Transport(format!(
                "response id {} does not match request {}",
                resp.id, request.id
            )));
        }
        Ok(resp)
    }
}

impl ClassifierClient for SocketClassifier {
    fn classify(&mut self, input: &CropInput<'_>) -> Result<Classification> {
        let request = WireRequest {
            id: self.next_id,
            image: encode_png(input.pixels)?,
        };
        self.next_id += 1;
        match self.exchange(&request) {
            Ok(r) => Ok(Classification {
                label: r.label,
                confidence: r.confidence,
            }),
            Err(e) => {
                // Drop the connection so a retry starts clean.
                self.conn = None;
                Err(e)
            }
        }
    }
}

/// Calls `client` up to `max_attempts` times, retrying transport failures.
pub fn classify_with_retry(
    client: &mut dyn ClassifierClient,
    input: &CropInput<'_>,
    max_attempts: usize,
) -> Result<Classification> {
    let mut last = None;
    for _ in 0..max_attempts.max(1) {
        match client.classify(input) {
            Ok(c) => return Ok(c),
            Err(e @ Error::Transport(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn pixels() -> RgbImage {
        RgbImage::from_fn(9, 8, |x, y| image::Rgb([x as u8 * 20, y as u8 * 30, 7]))
    }

    #[test]
    fn oracle_answers_by_overlap() {
        let truth = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let mut o = IouOracle::new([(1, (truth, "cat".to_string()))].into());
        let px = pixels();
        let hit = o
            .classify(&CropInput {
                image_id: 1,
                region: truth,
                pixels: &px,
            })
            .unwrap();
        assert_eq!(hit.label, "cat");
        let miss = o
            .classify(&CropInput {
                image_id: 1,
                region: BoundingBox::new(20.0, 20.0, 30.0, 30.0),
                pixels: &px,
            })
            .unwrap();
        assert_eq!(miss.label, ORACLE_MISS);
        assert!(o
            .classify(&CropInput {
                image_id: 2,
                region: truth,
                pixels: &px
            })
            .is_err());
    }

    #[test]
    fn png_round_trip() {
        let px = pixels();
        assert_eq!(decode_png(&encode_png(&px).unwrap()).unwrap(), px);
    }

    /// Serves `answers` requests, replying with the image width as the label.
    fn serve(listener: TcpListener, drop_first: bool) -> std::thread::JoinHandle<()> {
        std::thread::spawn(move || {
            let mut first = drop_first;
            for stream in listener.incoming() {
                let stream = stream.unwrap();
                if first {
                    first = false;
                    drop(stream);
                    continue;
                }
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut writer = stream;
                let mut line = String::new();
                while reader.read_line(&mut line).unwrap() > 0 {
                    let req: WireRequest = serde_json::from_str(line.trim_end()).unwrap();
                    let img = decode_png(&req.image).unwrap();
                    let resp = WireResponse {
                        id: req.id,
                        label: format!("w{}", img.width()),
                        confidence: 0.5,
                    };
                    writeln!(writer, "{}", serde_json::to_string(&resp).unwrap()).unwrap();
                    line.clear();
                }
                return;
            }
        })
    }

    #[test]
    fn socket_protocol_and_retry() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = serve(listener, true);
        let mut client = SocketClassifier::new(addr);
        let px = pixels();
        let input = CropInput {
            image_id: 1,
            region: BoundingBox::new(0.0, 0.0, 9.0, 8.0),
            pixels: &px,
        };
        let c = classify_with_retry(&mut client, &input, 3).unwrap();
        assert_eq!(c.label, "w9");
        let c = client.classify(&input).unwrap();
        assert_eq!(c.confidence, 0.5);
        drop(client);
        server.join().unwrap();
    }

    #[test]
    fn unreachable_service_fails_after_bounded_attempts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let mut client = SocketClassifier::new(addr);
        let px = pixels();
        let input = CropInput {
            image_id: 1,
            region: BoundingBox::new(0.0, 0.0, 9.0, 8.0),
            pixels: &px,
        };
        let err = classify_with_retry(&mut client, &input, 2).unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
    }
}
