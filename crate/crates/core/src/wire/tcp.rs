//! TCP transport. Each message on a stream is an envelope
//! `request_id u64 LE | frame`; frames are self-delimiting through their
//! header, and replies reuse the request id of the request they answer.

use std::collections::HashMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{unbounded, Sender};
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::wire::frame::{frame_len, FRAME_HEADER_LEN};
use crate::wire::transport::{Endpoint, Inbox, ReplyTo, Request, Responder};

/// Read one envelope; `Ok(None)` on a clean end of stream between
/// envelopes.
fn read_envelope(r: &mut impl Read) -> Result<Option<(u64, Vec<u8>)>> {
    let mut id = [0u8; 8];
    let mut got = 0;
    while got < id.len() {
        match r.read(&mut id[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::protocol(got, "connection lost inside envelope header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::transport(false, e.to_string())),
        }
    }
    let mut frame = vec![0u8; FRAME_HEADER_LEN];
    read_fully(r, &mut frame, 0)?;
    let total = frame_len(&frame)?;
    frame.resize(total, 0);
    read_fully(r, &mut frame[FRAME_HEADER_LEN..], FRAME_HEADER_LEN)?;
    Ok(Some((u64::from_le_bytes(id), frame)))
}

fn read_fully(r: &mut impl Read, buf: &mut [u8], base: usize) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(Error::protocol(base + got, "connection lost mid-frame")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::protocol(base + got, format!("read failed mid-frame: {e}"))),
        }
    }
    Ok(())
}

fn write_envelope(w: &mut TcpStream, id: u64, frame: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(8 + frame.len());
    buf.extend_from_slice(&id.to_le_bytes());
    buf.extend_from_slice(frame);
    w.write_all(&buf)
}

/// Listening side. Dropping the server closes the listener and every
/// accepted connection.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
}

impl TcpServer {
    pub fn bind(addr: &str) -> Result<(TcpServer, Inbox)> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (tx, rx) = unbounded();
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let (stop2, conns2) = (stop.clone(), conns.clone());
        thread::Builder::new()
            .name(format!("tcp-accept-{local}"))
            .spawn(move || accept_loop(listener, tx, stop2, conns2))?;
        Ok((TcpServer { addr: local, stop, conns }, rx))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Request>, stop: Arc<AtomicBool>, conns: Arc<Mutex<Vec<TcpStream>>>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        if let Ok(c) = stream.try_clone() {
            conns.lock().push(c);
        }
        let tx = tx.clone();
        let _ = thread::Builder::new()
            .name("tcp-conn".into())
            .spawn(move || serve_connection(stream, tx));
    }
}

fn serve_connection(stream: TcpStream, tx: Sender<Request>) {
    let Ok(writer) = stream.try_clone() else { return };
    let writer = Arc::new(Mutex::new(writer));
    let mut reader = BufReader::new(stream);
    while let Ok(Some((id, frame))) = read_envelope(&mut reader) {
        let w = writer.clone();
        let sink = Box::new(move |reply: Vec<u8>| {
            let _ = write_envelope(&mut w.lock(), id, &reply);
        });
        if tx
            .send(Request {
                frame,
                responder: Responder::new(id, Some(sink)),
            })
            .is_err()
        {
            break;
        }
    }
    let _ = writer.lock().shutdown(Shutdown::Both);
}

type Pending = Arc<Mutex<HashMap<u64, ReplyTo>>>;

/// Client side of one TCP connection; requests multiplex by request id.
pub struct TcpEndpoint {
    name: String,
    writer: Mutex<TcpStream>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    next_id: AtomicU64,
}

impl TcpEndpoint {
    pub fn connect(addr: SocketAddr, name: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let pending: Pending = Arc::new(Mutex::new(HashMap::new()));
        let closed = Arc::new(AtomicBool::new(false));
        let (p2, c2) = (pending.clone(), closed.clone());
        thread::Builder::new()
            .name(format!("tcp-client-{name}"))
            .spawn(move || client_reader(reader, p2, c2))?;
        Ok(Self {
            name: name.to_string(),
            writer: Mutex::new(stream),
            pending,
            closed,
            next_id: AtomicU64::new(1),
        })
    }
}

fn client_reader(stream: TcpStream, pending: Pending, closed: Arc<AtomicBool>) {
    let mut reader = BufReader::new(stream);
    let failure = loop {
        match read_envelope(&mut reader) {
            Ok(Some((id, frame))) => {
                if let Some(r) = pending.lock().remove(&id) {
                    r.deliver(Ok(frame));
                }
            }
            Ok(None) => break Error::transport(false, "connection closed by peer"),
            Err(e) => break e,
        }
    };
    closed.store(true, Ordering::SeqCst);
    for (_, r) in pending.lock().drain() {
        r.deliver(Err(match &failure {
            Error::Protocol { offset, reason } => Error::Protocol {
                offset: *offset,
                reason: reason.clone(),
            },
            other => Error::transport(false, other.to_string()),
        }));
    }
}

impl Endpoint for TcpEndpoint {
    fn send(&self, frame: Vec<u8>, reply: Option<ReplyTo>) -> Result<()> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(Error::transport(false, format!("{}: connection closed", self.name)));
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        if let Some(r) = reply {
            self.pending.lock().insert(id, r);
        }
        let written = write_envelope(&mut self.writer.lock(), id, &frame);
        if let Err(e) = written {
            self.pending.lock().remove(&id);
            self.closed.store(true, Ordering::SeqCst);
            return Err(Error::transport(false, format!("{}: {e}", self.name)));
        }
        Ok(())
    }

    fn name(&self) -> &str {
        &self.name
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::frame::{encode_frame, MsgType};
    use crate::wire::transport::{call, DEFAULT_TIMEOUT};
    use std::time::Duration;

    #[test]
    fn tcp_echo_and_kill() {
        let (server, inbox) = TcpServer::bind("127.0.0.1:0").unwrap();
        thread::spawn(move || {
            for req in inbox {
                let f = req.frame.clone();
                req.responder.respond(f);
            }
        });
        let ep = TcpEndpoint::connect(server.local_addr(), "echo").unwrap();
        let frame = encode_frame(MsgType::PullEmbedding, 0, &[&[7u8; 1000]]);
        assert_eq!(call(&ep, frame.clone(), DEFAULT_TIMEOUT).unwrap().as_bytes(), frame.as_slice());
        drop(server);
        // The peer closes; later calls fail with a transport error.
        thread::sleep(Duration::from_millis(50));
        let err = call(&ep, frame, Duration::from_millis(500)).unwrap_err();
        assert!(matches!(err, Error::Transport { .. }), "{err:?}");
    }

    #[test]
    fn truncated_stream_is_protocol_error() {
        let frame = encode_frame(MsgType::Ack, 0, &[&[1, 2, 3, 4]]);
        let mut env = 5u64.to_le_bytes().to_vec();
        env.extend_from_slice(&frame[..frame.len() - 2]);
        let err = read_envelope(&mut env.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }));
        assert!(read_envelope(&mut [].as_slice()).unwrap().is_none());
    }
}
