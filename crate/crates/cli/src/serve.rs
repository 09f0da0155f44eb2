//! TCP service: newline-delimited JSON frames in, scan points out.
//!
//! One handler thread per connection; the model bundle is immutable and
//! shared. Per-request RNG streams derive from (seed, frame_id), so results
//! match offline `infer` regardless of connection interleaving.

use crate::model::{response_for, ModelBundle, WireError, WireRequest};
use epwsim_core::Result;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_interrupt(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_interrupt_handler() {
    let handler = on_interrupt as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

pub fn serve(port: u16, bundle: ModelBundle) -> Result<()> {
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    eprintln!("listening on {addr}");
    install_interrupt_handler();
    let bundle = Arc::new(bundle);
    let mut handlers = Vec::new();
    while !STOP.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                eprintln!("connection from {peer}");
                let bundle = Arc::clone(&bundle);
                handlers.push(std::thread::spawn(move || handle_connection(stream, bundle)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(25));
            }
            Err(e) => return Err(e.into()),
        }
        handlers.retain(|h| !h.is_finished());
    }
    eprintln!("interrupt received, shutting down");
    for h in handlers {
        let _ = h.join();
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, bundle: Arc<ModelBundle>) {
    stream.set_nonblocking(false).ok();
    let reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let reply = process_line(&line, &bundle);
        if writer.write_all(reply.as_bytes()).is_err() || writer.write_all(b"\n").is_err() {
            break;
        }
        if writer.flush().is_err() {
            break;
        }
    }
}

/// One request line to one response line; malformed input produces an error
/// object instead of closing the connection.
pub fn process_line(line: &str, bundle: &ModelBundle) -> String {
    let request: WireRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return serde_json::to_string(&WireError {
                frame_id: None,
                error: format!("bad request: {e}"),
            })
            .unwrap();
        }
    };
    let frame_id = request.frame_id;
    let result = request.into_frame().and_then(|frame| bundle.process(&frame));
    match result {
        Ok(scan) => serde_json::to_string(&response_for(&scan)).unwrap(),
        Err(e) => serde_json::to_string(&WireError {
            frame_id: Some(frame_id),
            error: e.to_string(),
        })
        .unwrap(),
    }
}
