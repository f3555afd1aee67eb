//! One request per connection: write a frame, read reply frames until the
//! peer closes.

use std::io::BufReader;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use vc_core::protocol::{read_frame, write_frame, Message, ProtocolError};

pub fn connect(address: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let addrs: Vec<SocketAddr> = address.to_socket_addrs()?.collect();
    let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, format!("no address for {address}"));
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Sends `msg` and collects up to `max_replies` frames.
pub fn request(address: &str, msg: &Message, timeout: Duration, max_replies: usize) -> Result<Vec<Message>, ProtocolError> {
    let mut stream = connect(address, timeout)?;
    write_frame(&mut stream, msg)?;
    let mut reader = BufReader::new(stream);
    let mut out = Vec::new();
    while out.len() < max_replies {
        match read_frame(&mut reader)? {
            Some(m) => out.push(m),
            None => break,
        }
    }
    Ok(out)
}

/// Sends `msg` and returns the first reply, if any.
pub fn exchange(address: &str, msg: &Message, timeout: Duration) -> Result<Option<Message>, ProtocolError> {
    Ok(request(address, msg, timeout, 1)?.into_iter().next())
}
