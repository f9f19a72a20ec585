//! Messages that cross party boundaries, and the two ways they travel:
//! in-process channels for simulation and a framed TCP stream for real
//! separation.
//!
//! Wire format: each frame is a big-endian `u32` payload length, one
//! message-type byte, then the payload. Tensors serialize as a rank byte,
//! little-endian `u32` dimensions, and little-endian `f64` values; label
//! vectors as a `u32` count plus `u32` entries; parameter payloads reuse
//! the checkpoint body layout. An `EpochEnd` frame is exactly five bytes:
//! `[0, 0, 0, 0, 5]`.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::time::Duration;

use crate::error::{FedError, Result};
use crate::models::{read_params_body, write_params_body, ByteReader, MlpParams, MAX_DIM};
use crate::tensor::Tensor;

/// Everything the coordinator and the two agents ever say to each other.
///
/// Latent feature batches flow up; latent gradients and fresh classifier
/// parameters flow back down. Raw inputs and labels held by the target
/// never appear here.
#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolMessage {
    /// Source agent -> coordinator: latent features with their labels.
    SourceBatch { features: Tensor, labels: Vec<u32> },
    /// Target agent -> coordinator: latent features only.
    TargetBatch { features: Tensor },
    /// Coordinator -> source agent: gradient at the source latents plus
    /// the classifier state after this round's update.
    GradToSource { grad: Tensor, classifier: MlpParams },
    /// Coordinator -> target agent: same, for the target latents.
    GradToTarget { grad: Tensor, classifier: MlpParams },
    EpochEnd,
    Shutdown,
}

impl ProtocolMessage {
    pub fn tag(&self) -> u8 {
        match self {
            ProtocolMessage::SourceBatch { .. } => 1,
            ProtocolMessage::TargetBatch { .. } => 2,
            ProtocolMessage::GradToSource { .. } => 3,
            ProtocolMessage::GradToTarget { .. } => 4,
            ProtocolMessage::EpochEnd => 5,
            ProtocolMessage::Shutdown => 6,
        }
    }

    pub fn tag_name(&self) -> &'static str {
        match self {
            ProtocolMessage::SourceBatch { .. } => "source_batch",
            ProtocolMessage::TargetBatch { .. } => "target_batch",
            ProtocolMessage::GradToSource { .. } => "grad_to_source",
            ProtocolMessage::GradToTarget { .. } => "grad_to_target",
            ProtocolMessage::EpochEnd => "epoch_end",
            ProtocolMessage::Shutdown => "shutdown",
        }
    }

    /// Shapes of the tensors this message carries, for logging.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            ProtocolMessage::SourceBatch { features, .. }
            | ProtocolMessage::TargetBatch { features } => vec![features.shape().to_vec()],
            ProtocolMessage::GradToSource { grad, classifier }
            | ProtocolMessage::GradToTarget { grad, classifier } => {
                let mut v = vec![grad.shape().to_vec()];
                for l in &classifier.layers {
                    v.push(l.weight.shape().to_vec());
                    v.push(l.bias.shape().to_vec());
                }
                v
            }
            _ => vec![],
        }
    }
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let rank = r.bytes(1)?[0] as usize;
    if rank == 0 || rank > 2 {
        return Err(FedError::Framing(format!("tensor rank {rank} not supported")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut len: u64 = 1;
    for _ in 0..rank {
        let d = r.u32_le()? as u64;
        len = len.saturating_mul(d);
        dims.push(d as usize);
    }
    if len == 0 || len > MAX_DIM {
        return Err(FedError::Bounds(format!("tensor of {len} elements refused")));
    }
    let mut vals = Vec::with_capacity(len as usize);
    for _ in 0..len {
        let v = r.f64_le()?;
        if !v.is_finite() {
            return Err(FedError::Framing(format!("non-finite tensor value {v}")));
        }
        vals.push(v);
    }
    Ok(Tensor::new(dims, vals))
}

fn write_labels(buf: &mut Vec<u8>, labels: &[u32]) {
    buf.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
}

fn read_labels(r: &mut ByteReader) -> Result<Vec<u32>> {
    let n = r.u32_le()? as u64;
    if n > MAX_DIM {
        return Err(FedError::Bounds(format!("label vector of {n} entries refused")));
    }
    (0..n).map(|_| r.u32_le()).collect()
}

/// Serialize one message to its type byte and payload bytes. The payload
/// is also what transcript entries hash, regardless of transport.
pub fn encode_payload(msg: &ProtocolMessage) -> (u8, Vec<u8>) {
    let mut buf = Vec::new();
    match msg {
        ProtocolMessage::SourceBatch { features, labels } => {
            write_tensor(&mut buf, features);
            write_labels(&mut buf, labels);
        }
        ProtocolMessage::TargetBatch { features } => write_tensor(&mut buf, features),
        ProtocolMessage::GradToSource { grad, classifier }
        | ProtocolMessage::GradToTarget { grad, classifier } => {
            write_tensor(&mut buf, grad);
            write_params_body(&mut buf, classifier);
        }
        ProtocolMessage::EpochEnd | ProtocolMessage::Shutdown => {}
    }
    (msg.tag(), buf)
}

/// Inverse of [`encode_payload`].
pub fn decode_payload(tag: u8, payload: &[u8]) -> Result<ProtocolMessage> {
    let mut r = ByteReader::new(payload);
    let msg = match tag {
        1 => {
            let features = read_tensor(&mut r)?;
            let labels = read_labels(&mut r)?;
            if features.rank() != 2 || labels.len() != features.shape()[0] {
                return Err(FedError::Protocol(format!(
                    "source batch carries {} labels for {:?} features",
                    labels.len(),
                    features.shape()
                )));
            }
            ProtocolMessage::SourceBatch { features, labels }
        }
        2 => {
            let features = read_tensor(&mut r)?;
            if features.rank() != 2 {
                return Err(FedError::Protocol("target batch features must be a matrix".into()));
            }
            ProtocolMessage::TargetBatch { features }
        }
        3 | 4 => {
            let grad = read_tensor(&mut r)?;
            let classifier = read_params_body(&mut r)?;
            if tag == 3 {
                ProtocolMessage::GradToSource { grad, classifier }
            } else {
                ProtocolMessage::GradToTarget { grad, classifier }
            }
        }
        5 => ProtocolMessage::EpochEnd,
        6 => ProtocolMessage::Shutdown,
        other => return Err(FedError::Protocol(format!("unknown message type {other}"))),
    };
    if r.remaining() != 0 {
        return Err(FedError::Framing(format!(
            "{} trailing bytes after {} payload",
            r.remaining(),
            msg.tag_name()
        )));
    }
    Ok(msg)
}

/// Refuse frames larger than this; nothing legitimate comes close.
const MAX_FRAME: u32 = 1 << 30;

pub fn write_frame(w: &mut impl Write, msg: &ProtocolMessage) -> Result<()> {
    let (tag, payload) = encode_payload(msg);
    if payload.len() as u64 > MAX_FRAME as u64 {
        return Err(FedError::Bounds(format!("frame of {} bytes refused", payload.len())));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())
        .and_then(|_| w.write_all(&[tag]))
        .and_then(|_| w.write_all(&payload))
        .map_err(|e| FedError::Transport(format!("send failed: {e}")))
}

pub fn read_frame(r: &mut impl Read) -> Result<ProtocolMessage> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)
        .map_err(|e| FedError::Transport(format!("recv failed: {e}")))?;
    let len = u32::from_be_bytes([head[0], head[1], head[2], head[3]]);
    if len > MAX_FRAME {
        return Err(FedError::Bounds(format!("frame of {len} bytes refused")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| FedError::Transport(format!("recv failed: {e}")))?;
    decode_payload(head[4], &payload)
}

/// A bidirectional message pipe. One end per party.
pub trait Duplex: Send {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()>;
    fn recv(&mut self) -> Result<ProtocolMessage>;
}

/// In-process end: messages move as values, no serialization, so the
/// simulated deployment is bit-exact with monolithic execution.
pub struct InProcEnd {
    tx: mpsc::Sender<ProtocolMessage>,
    rx: mpsc::Receiver<ProtocolMessage>,
    timeout: Duration,
}

/// Connected pair of in-process ends.
pub fn inproc_pair() -> (InProcEnd, InProcEnd) {
    inproc_pair_with_timeout(Duration::from_secs(60))
}

pub fn inproc_pair_with_timeout(timeout: Duration) -> (InProcEnd, InProcEnd) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        InProcEnd { tx: tx_a, rx: rx_a, timeout },
        InProcEnd { tx: tx_b, rx: rx_b, timeout },
    )
}

impl Duplex for InProcEnd {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        self.tx
            .send(msg.clone())
            .map_err(|_| FedError::Transport("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => {
                FedError::Transport(format!("no message within {:?}", self.timeout))
            }
            mpsc::RecvTimeoutError::Disconnected => FedError::Transport("peer hung up".into()),
        })
    }
}

/// Framed TCP end. The coordinator identifies which agent dialed in by
/// peeking at the first frame, so the first received message may be
/// stashed back for the normal receive path.
pub struct TcpEnd {
    stream: TcpStream,
    stashed: Option<ProtocolMessage>,
}

impl TcpEnd {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| FedError::Transport(format!("cannot reach {addr}: {e}")))?;
        Self::from_stream(stream)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream
            .set_read_timeout(Some(Duration::from_secs(120)))
            .map_err(|e| FedError::Transport(format!("cannot set timeout: {e}")))?;
        stream
            .set_nodelay(true)
            .map_err(|e| FedError::Transport(format!("cannot set nodelay: {e}")))?;
        Ok(TcpEnd { stream, stashed: None })
    }

    /// Read one frame and hand it back, but leave it queued for the next
    /// `recv` call.
    pub fn peek_first(&mut self) -> Result<&ProtocolMessage> {
        if self.stashed.is_none() {
            let msg = read_frame(&mut self.stream)?;
            self.stashed = Some(msg);
        }
        Ok(self.stashed.as_ref().expect("just stashed"))
    }
}

impl Duplex for TcpEnd {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        write_frame(&mut self.stream, msg)?;
        self.stream
            .flush()
            .map_err(|e| FedError::Transport(format!("flush failed: {e}")))
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        if let Some(msg) = self.stashed.take() {
            return Ok(msg);
        }
        read_frame(&mut self.stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpParams;
    use crate::testutil::seeded_vec;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sample_params() -> MlpParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        MlpParams::init(&[3, 4, 2], &mut rng)
    }

    #[test]
    fn epoch_end_frame_is_five_bytes() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &ProtocolMessage::EpochEnd).unwrap();
        assert_eq!(buf, vec![0, 0, 0, 0, 5]);
    }

    #[test]
    fn target_batch_frame_layout() {
        let msg = ProtocolMessage::TargetBatch {
            features: Tensor::new([1, 2], vec![1.0, 2.0]),
        };
        let (tag, payload) = encode_payload(&msg);
        assert_eq!(tag, 2);
        // rank byte + two u32 dims + two f64 values
        assert_eq!(payload.len(), 1 + 8 + 16);
        assert_eq!(payload[0], 2);
        assert_eq!(&payload[1..5], &1u32.to_le_bytes());
        assert_eq!(&payload[5..9], &2u32.to_le_bytes());
        assert_eq!(&payload[9..17], &1.0f64.to_le_bytes());

        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 25);
        assert_eq!(&buf[..4], &25u32.to_be_bytes());
        assert_eq!(buf[4], 2);
    }

    #[test]
    fn all_variants_roundtrip() {
        let msgs = vec![
            ProtocolMessage::SourceBatch {
                features: Tensor::new([2, 3], seeded_vec(1, 6)),
                labels: vec![0, 5],
            },
            ProtocolMessage::TargetBatch {
                features: Tensor::new([3, 2], seeded_vec(2, 6)),
            },
            ProtocolMessage::GradToSource {
                grad: Tensor::new([2, 4], seeded_vec(3, 8)),
                classifier: sample_params(),
            },
            ProtocolMessage::GradToTarget {
                grad: Tensor::new([4], seeded_vec(4, 4)),
                classifier: sample_params(),
            },
            ProtocolMessage::EpochEnd,
            ProtocolMessage::Shutdown,
        ];
        for msg in msgs {
            let (tag, payload) = encode_payload(&msg);
            let back = decode_payload(tag, &payload).unwrap();
            assert_eq!(back, msg);

            let mut framed = Vec::new();
            write_frame(&mut framed, &msg).unwrap();
            let back2 = read_frame(&mut framed.as_slice()).unwrap();
            assert_eq!(back2, msg);
        }
    }

    #[test]
    fn decode_rejects_malformed_frames() {
        let msg = ProtocolMessage::TargetBatch {
            features: Tensor::new([2, 2], seeded_vec(6, 4)),
        };
        let (tag, payload) = encode_payload(&msg);

        // truncation
        assert!(matches!(
            decode_payload(tag, &payload[..payload.len() - 1]),
            Err(FedError::Framing(_))
        ));
        // trailing garbage
        let mut long = payload.clone();
        long.push(0);
        assert!(matches!(decode_payload(tag, &long), Err(FedError::Framing(_))));
        // unknown type
        assert!(matches!(decode_payload(9, &payload), Err(FedError::Protocol(_))));
        // absurd dimensions
        let mut huge = vec![2u8];
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_payload(2, &huge), Err(FedError::Bounds(_))));
        // non-finite value
        let mut nan = vec![1u8];
        nan.extend_from_slice(&1u32.to_le_bytes());
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_payload(2, &nan), Err(FedError::Framing(_))));
    }

    #[test]
    fn source_batch_label_count_must_match_rows() {
        let msg = ProtocolMessage::SourceBatch {
            features: Tensor::new([2, 2], seeded_vec(7, 4)),
            labels: vec![0, 1],
        };
        let (_, mut payload) = encode_payload(&msg);
        // label count sits right after the tensor: rank(1) + dims(8) + vals(32)
        let count_off = 1 + 8 + 32;
        payload[count_off] = 1;
        payload.truncate(count_off + 4 + 4);
        assert!(matches!(
            decode_payload(1, &payload),
            Err(FedError::Protocol(_))
        ));
    }

    #[test]
    fn inproc_pair_carries_messages_and_times_out() {
        let (mut a, mut b) = inproc_pair_with_timeout(Duration::from_millis(50));
        let msg = ProtocolMessage::TargetBatch {
            features: Tensor::new([1, 1], vec![3.5]),
        };
        a.send(&msg).unwrap();
        assert_eq!(b.recv().unwrap(), msg);
        assert!(matches!(b.recv(), Err(FedError::Transport(_))));
    }

    #[test]
    fn tcp_pair_roundtrips_and_peeks() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut end = TcpEnd::connect(&addr.to_string()).unwrap();
            end.send(&ProtocolMessage::SourceBatch {
                features: Tensor::new([1, 2], vec![1.0, -2.0]),
                labels: vec![3],
            })
            .unwrap();
            let reply = end.recv().unwrap();
            assert_eq!(reply, ProtocolMessage::EpochEnd);
            end.send(&ProtocolMessage::Shutdown).unwrap();
        });
        let (stream, _) = listener.accept().unwrap();
        let mut server = TcpEnd::from_stream(stream).unwrap();
        assert_eq!(server.peek_first().unwrap().tag(), 1);
        // peeked message still arrives through recv
        let first = server.recv().unwrap();
        assert_eq!(first.tag(), 1);
        server.send(&ProtocolMessage::EpochEnd).unwrap();
        assert_eq!(server.recv().unwrap(), ProtocolMessage::Shutdown);
        client.join().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn fuzzed_messages_roundtrip(
            rows in 1usize..5,
            cols in 1usize..5,
            vals in proptest::collection::vec(-1e6f64..1e6, 25),
            labels in proptest::collection::vec(0u32..100, 5),
            variant in 0u8..4,
        ) {
            let features = Tensor::new([rows, cols], vals[..rows * cols].to_vec());
            let msg = match variant {
                0 => ProtocolMessage::SourceBatch {
                    labels: labels[..rows].to_vec(),
                    features,
                },
                1 => ProtocolMessage::TargetBatch { features },
                2 => ProtocolMessage::GradToSource { grad: features, classifier: sample_params() },
                _ => ProtocolMessage::GradToTarget { grad: features, classifier: sample_params() },
            };
            let (tag, payload) = encode_payload(&msg);
            prop_assert_eq!(decode_payload(tag, &payload).unwrap(), msg);
        }
    }
}
