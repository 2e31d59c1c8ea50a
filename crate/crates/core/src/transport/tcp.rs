//! Length-prefixed TCP transport.
//!
//! Frame layout, all integers big-endian:
//!
//! ```text
//! u32  body_len            length of everything after this field
//! u16  topic_len
//! [u8] topic               UTF-8, topic_len bytes
//! [u8] payload             body_len - 2 - topic_len bytes
//! ```
//!
//! After each frame the server answers with one byte: `0x06` when the message
//! was accepted by the downstream channel, `0x15` when it was refused. A
//! publish only counts as acknowledged after `0x06` arrives.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::{Publisher, Topic, TransportError};

pub const ACK: u8 = 0x06;
pub const NAK: u8 = 0x15;
/// Largest accepted frame body.
pub const MAX_FRAME_LEN: usize = 1 << 20;

pub fn encode_frame(topic: &str, payload: &[u8]) -> Result<Vec<u8>, TransportError> {
    let topic_len = u16::try_from(topic.len())
        .map_err(|_| TransportError::InvalidTopic(format!("topic too long ({} bytes)", topic.len())))?;
    let body_len = 2 + topic.len() + payload.len();
    if body_len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(body_len));
    }
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(&topic_len.to_be_bytes());
    out.extend_from_slice(topic.as_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a new frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(String, Vec<u8>)>, TransportError> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let body_len = u32::from_be_bytes(len_buf) as usize;
    if body_len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(body_len));
    }
    if body_len < 2 {
        return Err(TransportError::BadFrame("body shorter than topic length field".into()));
    }
    let mut body = vec![0u8; body_len];
    r.read_exact(&mut body)?;
    let topic_len = u16::from_be_bytes([body[0], body[1]]) as usize;
    if 2 + topic_len > body_len {
        return Err(TransportError::BadFrame("topic length exceeds body".into()));
    }
    let topic = std::str::from_utf8(&body[2..2 + topic_len])
        .map_err(|_| TransportError::BadFrame("topic is not UTF-8".into()))?
        .to_string();
    let payload = body[2 + topic_len..].to_vec();
    Ok(Some((topic, payload)))
}

/// Publisher that sends frames to a remote hub, reconnecting lazily.
pub struct TcpPublisher {
    addr: SocketAddr,
    timeout: Duration,
    stream: Mutex<Option<TcpStream>>,
}

impl TcpPublisher {
    pub fn new(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| TransportError::InvalidConfig("address resolved to nothing".into()))?;
        Ok(Self {
            addr,
            timeout: Duration::from_secs(5),
            stream: Mutex::new(None),
        })
    }

    fn exchange(stream: &mut TcpStream, frame: &[u8]) -> Result<(), TransportError> {
        stream.write_all(frame)?;
        stream.flush()?;
        let mut ack = [0u8; 1];
        stream.read_exact(&mut ack)?;
        match ack[0] {
            ACK => Ok(()),
            NAK => Err(TransportError::Rejected),
            other => Err(TransportError::BadFrame(format!("unexpected ack byte {other:#04x}"))),
        }
    }
}

impl Publisher for TcpPublisher {
    fn publish(&self, topic: &Topic, payload: &[u8]) -> Result<(), TransportError> {
        let frame = encode_frame(&topic.to_string(), payload)?;
        let mut guard = self.stream.lock().expect("publisher lock poisoned");
        if guard.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
            s.set_read_timeout(Some(self.timeout))?;
            s.set_write_timeout(Some(self.timeout))?;
            s.set_nodelay(true)?;
            *guard = Some(s);
        }
        let stream = guard.as_mut().expect("connected above");
        let res = Self::exchange(stream, &frame);
        if matches!(res, Err(TransportError::Io(_)) | Err(TransportError::BadFrame(_))) {
            *guard = None;
        }
        res
    }
}

/// Accepts framed publishes and forwards each into `sink`, acking per frame.
/// Runs until `stop` is set.
pub fn serve(listener: TcpListener, sink: Arc<dyn Publisher>, stop: Arc<AtomicBool>) -> Result<(), TransportError> {
    listener.set_nonblocking(true)?;
    let mut workers = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let sink = Arc::clone(&sink);
                let stop = Arc::clone(&stop);
                workers.push(thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, sink.as_ref(), &stop) {
                        log::warn!("connection from {peer} ended: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(e.into()),
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

fn handle_connection(mut stream: TcpStream, sink: &dyn Publisher, stop: &AtomicBool) -> Result<(), TransportError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    loop {
        if stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        // Wait for the first byte with a timeout so `stop` is honored, then
        // read the rest of the frame blocking.
        let mut first = [0u8; 1];
        match stream.peek(&mut first) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e.into()),
        }
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let frame = read_frame(&mut stream)?;
        stream.set_read_timeout(Some(Duration::from_millis(200)))?;
        let Some((topic, payload)) = frame else {
            return Ok(());
        };
        let reply = match Topic::parse(&topic) {
            Ok(t) => match sink.publish(&t, &payload) {
                Ok(()) => ACK,
                Err(e) => {
                    log::debug!("downstream refused frame on {topic}: {e}");
                    NAK
                }
            },
            Err(e) => {
                log::warn!("frame with bad topic: {e}");
                NAK
            }
        };
        stream.write_all(&[reply])?;
    }
}
