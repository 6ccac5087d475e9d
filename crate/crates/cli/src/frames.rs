//! Real-socket mode: a TCP listener accepting `<EMG>` frames and handing
//! them to one simulated node.

use std::net::SocketAddr;

use anyhow::Result;
use lifeline_core::NodeId;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use crate::api::AppState;

/// Port frames are exchanged on.
pub const FRAME_PORT: u16 = 33333;

const MAX_CONNECTION_BYTES: usize = 4 << 20;

/// Splits a byte stream after each closing `</EMG>`. A trailing remainder
/// that is not whitespace is returned as its own chunk.
pub fn split_frames(buf: &[u8]) -> Vec<&[u8]> {
    const END: &[u8] = b"</EMG>";
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + END.len() <= buf.len() {
        if &buf[i..i + END.len()] == END {
            let chunk = trim(&buf[start..i + END.len()]);
            if !chunk.is_empty() {
                out.push(chunk);
            }
            i += END.len();
            start = i;
        } else {
            i += 1;
        }
    }
    let rest = trim(&buf[start..]);
    if !rest.is_empty() {
        out.push(rest);
    }
    out
}

fn trim(b: &[u8]) -> &[u8] {
    let s = b
        .iter()
        .position(|c| !c.is_ascii_whitespace())
        .unwrap_or(b.len());
    let e = b
        .iter()
        .rposition(|c| !c.is_ascii_whitespace())
        .map_or(s, |e| e + 1);
    &b[s..e]
}

pub async fn listen(addr: SocketAddr, node: NodeId, state: AppState) -> Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(%addr, %node, "frame listener up");
    loop {
        let (sock, peer) = listener.accept().await?;
        let (node, state) = (node.clone(), state.clone());
        tokio::spawn(async move {
            if let Err(e) = handle(sock, node, state).await {
                tracing::warn!(%peer, "frame connection: {e}");
            }
        });
    }
}

async fn handle(mut sock: TcpStream, node: NodeId, state: AppState) -> Result<()> {
    let mut buf = Vec::new();
    (&mut sock)
        .take(MAX_CONNECTION_BYTES as u64)
        .read_to_end(&mut buf)
        .await?;
    let chunks = split_frames(&buf);
    {
        let mut s = state.session.lock().await;
        for c in &chunks {
            s.inject_frame(&node, c.to_vec())?;
        }
    }
    sock.write_all(format!("OK {}\n", chunks.len()).as_bytes())
        .await?;
    Ok(())
}
