//! Newline-delimited JSON framing for channel messages, and a transport
//! that carries every delivered message across a localhost TCP connection.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;

use pcb_core::channel::Message;
use pcb_core::sim::Transport;

/// Environment variable choosing how the simulated link carries messages:
/// `memory` (default) or `socket`.
pub const TRANSPORT_ENV: &str = "PCB_TRANSPORT";

pub fn encode(m: &Message) -> String {
    let mut s = serde_json::to_string(m).expect("messages serialize");
    s.push('\n');
    s
}

pub fn decode(line: &str) -> Result<Message, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
}

pub fn write_frame(w: &mut impl Write, m: &Message) -> io::Result<()> {
    w.write_all(encode(m).as_bytes())?;
    w.flush()
}

/// Reads one frame; `Ok(None)` at end of stream.
pub fn read_frame(r: &mut impl BufRead) -> io::Result<Option<Message>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    decode(&line).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// The receiving end runs on its own thread so large frames never block
/// the sender.
pub struct SocketTransport {
    writer: TcpStream,
    frames: mpsc::Receiver<io::Result<Option<Message>>>,
}

impl SocketTransport {
    /// Opens a loopback connection on an ephemeral port.
    pub fn loopback() -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let writer = TcpStream::connect(listener.local_addr()?)?;
        writer.set_nodelay(true)?;
        let (server, _) = listener.accept()?;
        let (tx, frames) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(server);
            loop {
                let frame = read_frame(&mut reader);
                let done = !matches!(frame, Ok(Some(_)));
                if tx.send(frame).is_err() || done {
                    return;
                }
            }
        });
        Ok(SocketTransport { writer, frames })
    }
}

impl Transport for SocketTransport {
    fn carry(&mut self, m: Message) -> Result<Message, String> {
        write_frame(&mut self.writer, &m).map_err(|e| e.to_string())?;
        match self.frames.recv() {
            Ok(Ok(Some(back))) => Ok(back),
            Ok(Ok(None)) | Err(_) => Err("connection closed".into()),
            Ok(Err(e)) => Err(e.to_string()),
        }
    }
}

/// Transport selected by the environment, if any.
pub fn from_env() -> io::Result<Option<Box<dyn Transport>>> {
    match std::env::var(TRANSPORT_ENV).as_deref() {
        Ok("socket") => Ok(Some(Box::new(SocketTransport::loopback()?))),
        Ok("memory") | Err(_) => Ok(None),
        Ok(other) => Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{TRANSPORT_ENV}={other}: expected memory or socket"),
        )),
    }
}
