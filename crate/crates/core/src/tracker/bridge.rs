//! JSON-lines bridge to an external segmentation process.
//!
//! The tracker writes one request per line to the child's stdin and reads one
//! response per line from its stdout. Gradient frames travel out of band as
//! raw little-endian `f64` files (row-major, `rows * cols` values) whose path
//! is sent in the `add_frame` request. Masks come back run-length encoded as
//! `[row, col_start, run_length]` triples.
//!
//! ```text
//! -> {"kind":"init","scan_id":"s","rows":512,"cols":512,"marker_ids":["M1","M2"]}
//! <- {"kind":"init","model":"name"}
//! -> {"kind":"add_frame","frame_index":0,"path":"/tmp/.../frame_000000.f64","rows":512,"cols":512}
//! <- {"kind":"add_frame","frame_index":0}
//! -> {"kind":"prompt","frame_index":0,"prompts":[{"marker_id":"M1","col":250.2,"row":180.9}]}
//! <- {"kind":"result","frame_index":0,"masks":[{"marker_id":"M1","rle":[[180,249,3]]}]}
//! -> {"kind":"shutdown"}
//! <- {"kind":"shutdown"}
//! ```
//!
//! Frames must be added in strictly increasing index order; anything else is
//! answered with an `error` carrying "ordering violation".

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{MarkerMask, PointPrompt, Segmenter};
use crate::geometry::AcquisitionGeometry;
use crate::gradient::GradientImage;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Request {
    Init {
        scan_id: String,
        rows: usize,
        cols: usize,
        marker_ids: Vec<String>,
    },
    AddFrame {
        frame_index: usize,
        path: PathBuf,
        rows: usize,
        cols: usize,
    },
    Prompt {
        frame_index: usize,
        prompts: Vec<WirePrompt>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Init {
        model: String,
    },
    AddFrame {
        frame_index: usize,
    },
    Result {
        frame_index: usize,
        masks: Vec<WireMask>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame_index: Option<usize>,
        message: String,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePrompt {
    pub marker_id: String,
    pub col: f64,
    pub row: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMask {
    pub marker_id: String,
    pub rle: Vec<[usize; 3]>,
}

/// Run-length encodes `(col, row)` pixels into `[row, col_start, len]`
/// triples, ordered by row then column. Duplicate pixels are collapsed.
pub fn rle_encode(pixels: &[(usize, usize)]) -> Vec<[usize; 3]> {
    let mut sorted: Vec<(usize, usize)> = pixels.iter().map(|&(c, r)| (r, c)).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut runs: Vec<[usize; 3]> = Vec::new();
    for (r, c) in sorted {
        match runs.last_mut() {
            Some(run) if run[0] == r && run[1] + run[2] == c => run[2] += 1,
            _ => runs.push([r, c, 1]),
        }
    }
    runs
}

/// Inverse of [`rle_encode`]; pixels come back sorted by row then column.
pub fn rle_decode(runs: &[[usize; 3]]) -> Vec<(usize, usize)> {
    let mut pixels: Vec<(usize, usize)> = runs
        .iter()
        .flat_map(|&[r, c0, n]| (c0..c0 + n).map(move |c| (c, r)))
        .collect();
    pixels.sort_unstable_by_key(|&(c, r)| (r, c));
    pixels.dedup();
    pixels
}

pub fn write_frame_file(path: &Path, gbar: &GradientImage) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(gbar.values.len() * 8);
    for v in gbar.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)
}

pub fn read_frame_file(path: &Path, rows: usize, cols: usize) -> io::Result<GradientImage> {
    let bytes = fs::read(path)?;
    if bytes.len() != rows * cols * 8 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("expected {} bytes, found {}", rows * cols * 8, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok(GradientImage {
        values: Array2::from_shape_vec((rows, cols), values).expect("length checked"),
        mu: None,
    })
}

static BRIDGE_DIRS: AtomicUsize = AtomicUsize::new(0);

/// Segmenter backed by an external process speaking the bridge protocol.
pub struct ExternalSegmenter {
    command: Vec<String>,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    frame_dir: PathBuf,
    model: Option<String>,
}

impl ExternalSegmenter {
    /// Starts `command[0]` with the remaining elements as arguments.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::InvalidParameter("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Adapter {
                command: command.join(" "),
                message: format!("failed to start: {e}"),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let frame_dir = std::env::temp_dir().join(format!(
            "markertrack-bridge-{}-{}",
            std::process::id(),
            BRIDGE_DIRS.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
        Ok(Self {
            command: command.to_vec(),
            child,
            stdin,
            stdout,
            frame_dir,
            model: None,
        })
    }

    /// Model identifier reported by the adapter at init.
    pub fn model(&self) -> Option<&str> {
        self.model.as_deref()
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Adapter {
            command: self.command.join(" "),
            message: message.into(),
        }
    }

    fn exchange(&mut self, request: &Request) -> Result<Response> {
        let line = serde_json::to_string(request).expect("requests serialize");
        let stdin = self.stdin.as_mut().ok_or_else(|| Error::Adapter {
            command: self.command.join(" "),
            message: "adapter already shut down".into(),
        })?;
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| self.fail(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| self.fail(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(self.fail("adapter closed its output"));
        }
        match serde_json::from_str::<Response>(&reply) {
            Ok(Response::Error { frame_index, message }) => Err(self.fail(match frame_index {
                Some(i) => format!("frame {i}: {message}"),
                None => message,
            })),
            Ok(r) => Ok(r),
            Err(e) => Err(self.fail(format!("malformed response: {e}"))),
        }
    }
}

impl Segmenter for ExternalSegmenter {
    fn begin_scan(&mut self, scan_id: &str, geometry: &AcquisitionGeometry, marker_ids: &[String]) -> Result<()> {
        match self.exchange(&Request::Init {
            scan_id: scan_id.to_owned(),
            rows: geometry.rows,
            cols: geometry.cols,
            marker_ids: marker_ids.to_vec(),
        })? {
            Response::Init { model } => {
                tracing::info!(%model, "segmentation adapter ready");
                self.model = Some(model);
                Ok(())
            }
            other => Err(self.fail(format!("expected init reply, got {other:?}"))),
        }
    }

    fn segment(
        &mut self,
        frame_index: usize,
        gbar: &GradientImage,
        prompts: &[PointPrompt],
    ) -> Result<Vec<MarkerMask>> {
        let (rows, cols) = gbar.dim();
        let path = self.frame_dir.join(format!("frame_{frame_index:06}.f64"));
        write_frame_file(&path, gbar).map_err(|e| Error::io(&path, e))?;
        let added = self.exchange(&Request::AddFrame {
            frame_index,
            path: path.clone(),
            rows,
            cols,
        });
        match added? {
            Response::AddFrame { frame_index: i } if i == frame_index => {}
            other => return Err(self.fail(format!("expected add_frame ack for {frame_index}, got {other:?}"))),
        }
        let reply = self.exchange(&Request::Prompt {
            frame_index,
            prompts: prompts
                .iter()
                .map(|p| WirePrompt {
                    marker_id: p.marker_id.clone(),
                    col: p.pixel.0,
                    row: p.pixel.1,
                })
                .collect(),
        });
        let _ = fs::remove_file(&path);
        let masks = match reply? {
            Response::Result { frame_index: i, masks } if i == frame_index => masks,
            other => return Err(self.fail(format!("expected result for frame {frame_index}, got {other:?}"))),
        };
        let mut by_id: BTreeMap<String, Vec<[usize; 3]>> = masks.into_iter().map(|m| (m.marker_id, m.rle)).collect();
        prompts
            .iter()
            .map(|p| {
                let pixels = by_id
                    .remove(&p.marker_id)
                    .map(|rle| rle_decode(&rle))
                    .unwrap_or_default();
                if pixels.iter().any(|&(c, r)| c >= cols || r >= rows) {
                    return Err(self.fail(format!("mask for {} leaves the frame", p.marker_id)));
                }
                Ok(MarkerMask {
                    marker_id: p.marker_id.clone(),
                    frame_index,
                    pixels,
                })
            })
            .collect()
    }

    fn finish(&mut self) -> Result<()> {
        if self.stdin.is_none() {
            return Ok(());
        }
        let reply = self.exchange(&Request::Shutdown);
        self.stdin = None;
        let status = self.child.wait().map_err(|e| self.fail(format!("wait failed: {e}")))?;
        match reply? {
            Response::Shutdown if status.success() => Ok(()),
            Response::Shutdown => Err(self.fail(format!("adapter exited with {status}"))),
            other => Err(self.fail(format!("expected shutdown ack, got {other:?}"))),
        }
    }
}

impl Drop for ExternalSegmenter {
    fn drop(&mut self) {
        if self.stdin.take().is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        let _ = fs::remove_dir_all(&self.frame_dir);
    }
}

/// Adapter side of the protocol. Reads requests from `input` until shutdown
/// or end of input, answering each on `output`; `segment` produces one mask
/// per prompt for the most recently added frame.
pub fn serve<R, W, F>(input: R, mut output: W, model: &str, mut segment: F) -> io::Result<()>
where
    R: BufRead,
    W: Write,
    F: FnMut(&GradientImage, &[PointPrompt]) -> Vec<MarkerMask>,
{
    let mut last: Option<(usize, GradientImage)> = None;
    let reply = |out: &mut W, r: &Response| -> io::Result<()> {
        writeln!(out, "{}", serde_json::to_string(r).expect("responses serialize"))?;
        out.flush()
    };
    let error = |frame_index, message: String| Response::Error { frame_index, message };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request = match serde_json::from_str::<Request>(&line) {
            Ok(r) => r,
            Err(e) => {
                reply(&mut output, &error(None, format!("malformed request: {e}")))?;
                continue;
            }
        };
        let response = match request {
            Request::Init { .. } => Response::Init {
                model: model.to_owned(),
            },
            Request::AddFrame {
                frame_index,
                path,
                rows,
                cols,
            } => {
                if last.as_ref().is_some_and(|(i, _)| frame_index <= *i) {
                    error(Some(frame_index), "ordering violation".into())
                } else {
                    match read_frame_file(&path, rows, cols) {
                        Ok(g) => {
                            last = Some((frame_index, g));
                            Response::AddFrame { frame_index }
                        }
                        Err(e) => error(Some(frame_index), format!("cannot read {}: {e}", path.display())),
                    }
                }
            }
            Request::Prompt { frame_index, prompts } => match &last {
                Some((i, g)) if *i == frame_index => {
                    let prompts: Vec<PointPrompt> = prompts
                        .into_iter()
                        .map(|p| PointPrompt {
                            marker_id: p.marker_id,
                            frame_index,
                            pixel: (p.col, p.row),
                        })
                        .collect();
                    let masks = segment(g, &prompts)
                        .into_iter()
                        .map(|m| WireMask {
                            rle: rle_encode(&m.pixels),
                            marker_id: m.marker_id,
                        })
                        .collect();
                    Response::Result { frame_index, masks }
                }
                _ => error(Some(frame_index), "prompt for a frame that was not just added".into()),
            },
            Request::Shutdown => {
                reply(&mut output, &Response::Shutdown)?;
                return Ok(());
            }
        };
        reply(&mut output, &response)?;
    }
    Ok(())
}
