//! Request/response transport. A server owns an [`Inbox`] of [`Request`]s;
//! clients hold [`Endpoint`] handles. Every request is answered at most once:
//! a request dropped without a reply is answered with an error frame.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};

use crate::error::{Error, Result};
use crate::wire::frame::{decode_frame, Frame, MsgType};
use crate::wire::msg;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_RETRIES: u32 = 3;

/// A reply delivered to the caller's channel, tagged with the caller's
/// correlation value.
#[derive(Debug)]
pub struct Reply {
    pub tag: u64,
    pub result: Result<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct ReplyTo {
    tx: Sender<Reply>,
    tag: u64,
}

impl ReplyTo {
    pub fn new(tx: Sender<Reply>, tag: u64) -> Self {
        Self { tx, tag }
    }

    pub(crate) fn deliver(self, result: Result<Vec<u8>>) {
        // The caller may have given up (timeout); a closed channel is fine.
        let _ = self.tx.send(Reply { tag: self.tag, result });
    }
}

type Sink = Box<dyn FnOnce(Vec<u8>) + Send>;

/// Server-side handle for answering one request.
pub struct Responder {
    request_id: u64,
    sink: Option<Sink>,
}

impl Responder {
    pub(crate) fn new(request_id: u64, sink: Option<Sink>) -> Self {
        Self { request_id, sink }
    }

    pub fn request_id(&self) -> u64 {
        self.request_id
    }

    pub fn respond(mut self, frame: Vec<u8>) {
        if let Some(sink) = self.sink.take() {
            sink(frame);
        }
    }

    pub fn respond_error(self, e: &Error) {
        self.respond(msg::encode_error(e));
    }
}

impl Drop for Responder {
    fn drop(&mut self) {
        if let Some(sink) = self.sink.take() {
            sink(msg::encode_error(&Error::transport(true, "request abandoned by server")));
        }
    }
}

impl std::fmt::Debug for Responder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Responder").field("request_id", &self.request_id).finish()
    }
}

#[derive(Debug)]
pub struct Request {
    pub frame: Vec<u8>,
    pub responder: Responder,
}

pub type Inbox = Receiver<Request>;

/// Client handle to one server.
pub trait Endpoint: Send + Sync {
    /// Queue `frame`; the reply, if wanted, arrives on `reply`.
    fn send(&self, frame: Vec<u8>, reply: Option<ReplyTo>) -> Result<()>;

    fn name(&self) -> &str;
}

/// Blocking request/response. An `Error` reply frame becomes `Err`.
pub fn call(ep: &dyn Endpoint, frame: Vec<u8>, timeout: Duration) -> Result<Frame> {
    let (tx, rx) = bounded(1);
    ep.send(frame, Some(ReplyTo::new(tx, 0)))?;
    let bytes = match rx.recv_timeout(timeout) {
        Ok(reply) => reply.result?,
        Err(RecvTimeoutError::Timeout) => {
            return Err(Error::transport(true, format!("{}: no reply within {timeout:?}", ep.name())))
        }
        Err(RecvTimeoutError::Disconnected) => {
            return Err(Error::transport(false, format!("{}: connection closed", ep.name())))
        }
    };
    let f = decode_frame(bytes)?;
    if f.msg_type == MsgType::Error {
        return Err(msg::decode_error(&f));
    }
    Ok(f)
}

/// [`call`] with retries on retriable failures; only for idempotent
/// requests.
pub fn call_idempotent(ep: &dyn Endpoint, frame: Vec<u8>, timeout: Duration, retries: u32) -> Result<Frame> {
    let mut attempt = 0;
    loop {
        match call(ep, frame.clone(), timeout) {
            Err(e) if e.is_retriable() && attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

/// In-process endpoint: frames are moved through a channel as encoded bytes.
#[derive(Clone)]
pub struct InProcEndpoint {
    name: Arc<str>,
    tx: Sender<Request>,
    next_id: Arc<AtomicU64>,
}

pub fn inproc_pair(name: &str) -> (InProcEndpoint, Inbox) {
    let (tx, rx) = unbounded();
    let ep = InProcEndpoint {
        name: name.into(),
        tx,
        next_id: Arc::new(AtomicU64::new(1)),
    };
    (ep, rx)
}

impl Endpoint for InProcEndpoint {
    fn send(&self, frame: Vec<u8>, reply: Option<ReplyTo>) -> Result<()> {
        let request_id = self.next_id.fetch_add(1, AtomicOrdering::Relaxed);
        let sink: Option<Sink> = reply.map(|r| Box::new(move |f: Vec<u8>| r.deliver(Ok(f))) as Sink);
        self.tx
            .send(Request {
                frame,
                responder: Responder::new(request_id, sink),
            })
            .map_err(|_| Error::transport(false, format!("{}: endpoint is down", self.name)))
    }

    fn name(&self) -> &str {
        &self.name
    }
}

struct Scheduled {
    due: Instant,
    seq: u64,
    job: Box<dyn FnOnce() + Send>,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

/// Single thread that runs jobs at their due instants, FIFO among equal
/// instants. Used to inject simulated link latency on replies.
#[derive(Clone)]
pub struct DelayLine {
    tx: Sender<Scheduled>,
    seq: Arc<AtomicU64>,
}

impl DelayLine {
    pub fn spawn(name: &str) -> Self {
        let (tx, rx) = unbounded::<Scheduled>();
        thread::Builder::new()
            .name(name.into())
            .spawn(move || run_delay_line(rx))
            .expect("spawn delay line");
        Self {
            tx,
            seq: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn schedule(&self, delay: Duration, job: impl FnOnce() + Send + 'static) {
        if delay.is_zero() {
            job();
            return;
        }
        let item = Scheduled {
            due: Instant::now() + delay,
            seq: self.seq.fetch_add(1, AtomicOrdering::Relaxed),
            job: Box::new(job),
        };
        if let Err(e) = self.tx.send(item) {
            (e.into_inner().job)();
        }
    }

    pub fn respond_after(&self, delay: Duration, responder: Responder, frame: Vec<u8>) {
        self.schedule(delay, move || responder.respond(frame));
    }
}

fn run_delay_line(rx: Receiver<Scheduled>) {
    let mut heap = BinaryHeap::new();
    let mut open = true;
    loop {
        let now = Instant::now();
        while heap.peek().is_some_and(|s: &Scheduled| s.due <= now) {
            (heap.pop().unwrap().job)();
        }
        if !open {
            match heap.peek() {
                None => return,
                Some(next) => thread::sleep(next.due.saturating_duration_since(Instant::now())),
            }
            continue;
        }
        let received = match heap.peek() {
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            Some(next) => rx.recv_timeout(next.due.saturating_duration_since(now)),
        };
        match received {
            Ok(item) => heap.push(item),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => open = false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::frame::encode_frame;

    fn echo_server(inbox: Inbox) {
        thread::spawn(move || {
            for req in inbox {
                let f = req.frame.clone();
                req.responder.respond(f);
            }
        });
    }

    #[test]
    fn loopback_echo() {
        let (ep, inbox) = inproc_pair("echo");
        echo_server(inbox);
        let frame = encode_frame(MsgType::PullEmbedding, 0, &[b"payload"]);
        let reply = call(&ep, frame.clone(), DEFAULT_TIMEOUT).unwrap();
        assert_eq!(reply.as_bytes(), frame.as_slice());
    }

    #[test]
    fn killed_endpoint_is_transport_error() {
        let (ep, inbox) = inproc_pair("dead");
        drop(inbox);
        let err = call(&ep, encode_frame(MsgType::Ack, 0, &[]), DEFAULT_TIMEOUT).unwrap_err();
        assert!(matches!(err, Error::Transport { retriable: false, .. }));
    }

    #[test]
    fn abandoned_request_gets_error_reply() {
        let (ep, inbox) = inproc_pair("drop");
        thread::spawn(move || {
            for req in inbox {
                drop(req);
            }
        });
        let err = call(&ep, encode_frame(MsgType::Ack, 0, &[]), DEFAULT_TIMEOUT).unwrap_err();
        assert!(err.is_retriable());
    }

    #[test]
    fn silent_server_times_out() {
        let (ep, inbox) = inproc_pair("slow");
        let err = call(&ep, encode_frame(MsgType::Ack, 0, &[]), Duration::from_millis(20)).unwrap_err();
        assert!(matches!(err, Error::Transport { retriable: true, .. }));
        drop(inbox);
    }

    #[test]
    fn delay_line_orders_by_due_time() {
        let line = DelayLine::spawn("test-delay");
        let (tx, rx) = unbounded();
        let start = Instant::now();
        for (i, ms) in [(0u32, 30u64), (1, 10), (2, 20), (3, 10)] {
            let tx = tx.clone();
            line.schedule(Duration::from_millis(ms), move || tx.send(i).unwrap());
        }
        let order: Vec<u32> = (0..4).map(|_| rx.recv().unwrap()).collect();
        assert_eq!(order, vec![1, 3, 2, 0]);
        assert!(start.elapsed() >= Duration::from_millis(30));
    }
}
