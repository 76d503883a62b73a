#pragma once

// Line-framed request protocol in front of a Store.
//
//   PING\r\n                          -> +PONG\r\n
//   SET <klen>\r\n<key> <vlen>\r\n<value>\r\n -> +OK\r\n
//   GET <klen>\r\n<key>\r\n           -> $<vlen>\r\n<value>\r\n | $-1\r\n
//   DEL <klen>\r\n<key>\r\n           -> :1\r\n | :0\r\n
//   SHUTDOWN\r\n                      -> +OK\r\n, then the server drains and stops
//
// Failures answer -ERR <text>\r\n and the connection stays open.

#include <pmkv/error.hpp>
#include <pmkv/store.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <charconv>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <future>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace pmkv::wire {

inline constexpr std::uint16_t kDefaultPort = 7379;

enum class Verb { get, set, del, ping, shutdown };

struct Command {
  Verb verb = Verb::ping;
  std::string key;
  std::string value;

  friend bool operator==(const Command&, const Command&) = default;
};

enum class ParseStatus { complete, incomplete, error };

struct ParseResult {
  ParseStatus status = ParseStatus::incomplete;
  Command command;
  std::size_t consumed = 0;  // bytes to drop from the front of the buffer
  std::string error;
};

namespace detail {

inline constexpr std::size_t kMaxHeaderLine = 32;

inline bool has_crlf_byte(std::string_view s) { return s.find_first_of("\r\n") != std::string_view::npos; }

// On a malformed frame, resynchronize after the first CRLF at or past `at`.
inline ParseResult fail(std::string_view buf, std::size_t at, std::string message) {
  ParseResult r;
  r.status = ParseStatus::error;
  r.error = std::move(message);
  const std::size_t crlf = buf.find("\r\n", at);
  r.consumed = crlf == std::string_view::npos ? buf.size() : crlf + 2;
  return r;
}

inline std::optional<std::uint64_t> parse_length(std::string_view digits) {
  if (digits.empty() || digits.size() > 8) return std::nullopt;
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
  if (ec != std::errc{} || p != digits.data() + digits.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses one frame from the front of `buf`. Total: every input yields a
/// command, a request for more bytes, or an error with the offending token.
inline ParseResult parse_command(std::string_view buf) {
  using detail::fail;
  const std::size_t eol = buf.find("\r\n");
  if (eol == std::string_view::npos) {
    if (buf.size() > detail::kMaxHeaderLine || buf.find('\n') != std::string_view::npos)
      return fail(buf, 0, "malformed header line");
    return {};
  }
  const std::string_view header = buf.substr(0, eol);
  const std::size_t sp = header.find(' ');
  const std::string_view verb = header.substr(0, sp);
  const std::string_view arg = sp == std::string_view::npos ? std::string_view{} : header.substr(sp + 1);

  ParseResult r;
  if (verb == "PING" || verb == "SHUTDOWN") {
    if (sp != std::string_view::npos) return fail(buf, 0, "unexpected argument '" + std::string(arg) + "'");
    r.status = ParseStatus::complete;
    r.command.verb = verb == "PING" ? Verb::ping : Verb::shutdown;
    r.consumed = eol + 2;
    return r;
  }
  if (verb == "GET")
    r.command.verb = Verb::get;
  else if (verb == "SET")
    r.command.verb = Verb::set;
  else if (verb == "DEL")
    r.command.verb = Verb::del;
  else
    return fail(buf, 0, "unknown command '" + std::string(verb) + "'");

  const auto klen = detail::parse_length(arg);
  if (!klen) return fail(buf, 0, "bad length '" + std::string(arg) + "'");
  if (*klen == 0 || *klen > kMaxKeySize) return fail(buf, 0, "key length " + std::string(arg) + " out of range");

  std::size_t pos = eol + 2;
  const std::string_view key = buf.substr(pos, *klen);
  if (detail::has_crlf_byte(key)) return fail(buf, pos, "key length mismatch");
  if (key.size() < *klen) return {};
  pos += *klen;
  r.command.key.assign(key);

  if (r.command.verb == Verb::set) {
    if (pos >= buf.size()) return {};
    if (buf[pos] != ' ') return fail(buf, pos, "expected ' <vlen>' after key");
    const std::size_t veol = buf.find("\r\n", pos);
    if (veol == std::string_view::npos) {
      if (buf.size() - pos > detail::kMaxHeaderLine) return fail(buf, pos, "malformed value length");
      return {};
    }
    const std::string_view vdigits = buf.substr(pos + 1, veol - pos - 1);
    const auto vlen = detail::parse_length(vdigits);
    if (!vlen) return fail(buf, pos, "bad length '" + std::string(vdigits) + "'");
    if (*vlen > kMaxValueSize) return fail(buf, pos, "value length " + std::string(vdigits) + " out of range");
    pos = veol + 2;
    const std::string_view value = buf.substr(pos, *vlen);
    if (detail::has_crlf_byte(value)) return fail(buf, pos, "value length mismatch");
    if (value.size() < *vlen) return {};
    pos += *vlen;
    r.command.value.assign(value);
  }

  if (buf.size() - pos < 2) {
    if (pos < buf.size() && buf[pos] != '\r') return fail(buf, pos, "length mismatch");
    return {};
  }
  if (buf.compare(pos, 2, "\r\n") != 0) return fail(buf, pos, "length mismatch");
  r.status = ParseStatus::complete;
  r.consumed = pos + 2;
  return r;
}

inline std::string encode(const Command& c) {
  switch (c.verb) {
    case Verb::ping: return "PING\r\n";
    case Verb::shutdown: return "SHUTDOWN\r\n";
    case Verb::get: return "GET " + std::to_string(c.key.size()) + "\r\n" + c.key + "\r\n";
    case Verb::del: return "DEL " + std::to_string(c.key.size()) + "\r\n" + c.key + "\r\n";
    case Verb::set:
      return "SET " + std::to_string(c.key.size()) + "\r\n" + c.key + " " + std::to_string(c.value.size()) + "\r\n" +
             c.value + "\r\n";
  }
  return {};
}

inline std::string reply_error(std::string_view message) { return "-ERR " + std::string(message) + "\r\n"; }
inline std::string reply_bulk(std::string_view v) { return "$" + std::to_string(v.size()) + "\r\n" + std::string(v) + "\r\n"; }

/// Runs one command against the store and returns the reply frame.
inline std::string execute(Store& store, const Command& c) {
  try {
    switch (c.verb) {
      case Verb::ping: return "+PONG\r\n";
      case Verb::shutdown: return "+OK\r\n";
      case Verb::set: store.set(c.key, c.value); return "+OK\r\n";
      case Verb::get: {
        const auto v = store.get(c.key);
        return v ? reply_bulk(*v) : "$-1\r\n";
      }
      case Verb::del: return store.del(c.key) ? ":1\r\n" : ":0\r\n";
    }
  } catch (const Error& e) {
    return reply_error(std::string(errc_name(e.code())) + " " + e.what());
  }
  return reply_error("internal");
}

/// Feeds a whole byte stream through parser and executor, as one
/// connection would see it. Stops after SHUTDOWN.
inline std::string run_session(Store& store, std::string_view input) {
  std::string out;
  while (!input.empty()) {
    ParseResult r = parse_command(input);
    if (r.status == ParseStatus::incomplete) {
      out += reply_error("protocol incomplete frame");
      break;
    }
    input.remove_prefix(r.consumed);
    if (r.status == ParseStatus::error) {
      out += reply_error("protocol " + r.error);
      continue;
    }
    out += execute(store, r.command);
    if (r.command.verb == Verb::shutdown) break;
  }
  return out;
}

struct ServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;  // 0 picks an ephemeral port
};

/// Connection readers feed a single executor, which is the only thread
/// that touches the store.
class Server {
 public:
  Server(Store& store, ServerOptions options = {}) : store_(store), options_(std::move(options)) {}
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;
  ~Server() {
    stop();
    join_all();
    if (listen_fd_ >= 0) ::close(listen_fd_);
  }

  void bind_and_listen() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(Errc::bind_failure, std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(options_.port);
    if (::inet_pton(AF_INET, options_.host.c_str(), &addr.sin_addr) != 1)
      throw Error(Errc::bind_failure, "bad address " + options_.host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(listen_fd_, 64) != 0)
      throw Error(Errc::bind_failure, options_.host + ":" + std::to_string(options_.port) + ": " + std::strerror(errno));
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  std::uint16_t port() const noexcept { return port_; }

  /// Accepts connections and executes commands until SHUTDOWN or stop().
  void serve() {
    if (listen_fd_ < 0) bind_and_listen();
    std::thread acceptor([this] { accept_loop(); });
    execute_loop();
    stop();
    acceptor.join();
    join_all();
    store_.commit_batch();
  }

  void stop() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
  }

 private:
  struct Job {
    Command command;
    std::promise<std::string> reply;
  };

  void accept_loop() {
    while (!stopping()) {
      pollfd p{listen_fd_, POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard lock(conn_mu_);
      readers_.emplace_back([this, fd] { read_loop(fd); });
    }
  }

  void read_loop(int fd) {
    std::string buf;
    char chunk[16 << 10];
    bool open = true;
    while (open && !stopping()) {
      pollfd p{fd, POLLIN, 0};
      const int ready = ::poll(&p, 1, 50);
      if (ready <= 0) continue;
      const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
      if (n <= 0) break;
      buf.append(chunk, static_cast<std::size_t>(n));
      std::size_t at = 0;
      while (open) {
        ParseResult r = parse_command(std::string_view(buf).substr(at));
        if (r.status == ParseStatus::incomplete) break;
        at += r.consumed;
        std::string reply;
        if (r.status == ParseStatus::error) {
          reply = reply_error("protocol " + r.error);
        } else {
          auto result = submit(std::move(r.command));
          if (!result) {
            open = false;
            break;
          }
          reply = result->get();
        }
        if (!send_all(fd, reply)) open = false;
      }
      buf.erase(0, at);
    }
    ::close(fd);
  }

  std::optional<std::future<std::string>> submit(Command c) {
    Job job{std::move(c), {}};
    auto fut = job.reply.get_future();
    {
      std::lock_guard lock(mu_);
      if (stopping_) return std::nullopt;
      queue_.push_back(std::move(job));
    }
    cv_.notify_one();
    return fut;
  }

  void execute_loop() {
    std::unique_lock lock(mu_);
    for (;;) {
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) break;  // stopping and drained
      Job job = std::move(queue_.front());
      queue_.pop_front();
      lock.unlock();
      std::string reply = execute(store_, job.command);
      const bool shutdown = job.command.verb == Verb::shutdown;
      if (shutdown) store_.commit_batch();
      job.reply.set_value(std::move(reply));
      lock.lock();
      if (shutdown) stopping_ = true;
      if (queue_.empty() && !stopping_) {
        lock.unlock();
        store_.commit_batch();
        lock.lock();
      }
    }
  }

  bool stopping() {
    std::lock_guard lock(mu_);
    return stopping_;
  }

  static bool send_all(int fd, std::string_view data) {
    while (!data.empty()) {
      const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
      if (n <= 0) return false;
      data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
  }

  void join_all() {
    std::list<std::thread> readers;
    {
      std::lock_guard lock(conn_mu_);
      readers.swap(readers_);
    }
    for (auto& t : readers)
      if (t.joinable()) t.join();
  }

  Store& store_;
  ServerOptions options_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Job> queue_;
  bool stopping_ = false;
  std::mutex conn_mu_;
  std::list<std::thread> readers_;
};

/// Blocking client used by tests and the load driver.
class Client {
 public:
  Client(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
    if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw Error(Errc::io_failure, "connect " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;
  ~Client() {
    if (fd_ >= 0) ::close(fd_);
  }

  /// Sends raw bytes and reads exactly one reply frame.
  std::string roundtrip(std::string_view request) {
    for (std::string_view rest = request; !rest.empty();) {
      const ssize_t n = ::send(fd_, rest.data(), rest.size(), MSG_NOSIGNAL);
      if (n <= 0) throw Error(Errc::io_failure, "send");
      rest.remove_prefix(static_cast<std::size_t>(n));
    }
    return read_reply();
  }

  std::string call(const Command& c) { return roundtrip(encode(c)); }

 private:
  std::string read_reply() {
    for (;;) {
      const std::size_t eol = buf_.find("\r\n");
      if (eol != std::string::npos) {
        std::size_t total = eol + 2;
        if (buf_[0] == '$' && buf_.compare(0, eol, "$-1") != 0) total += std::stoull(buf_.substr(1, eol - 1)) + 2;
        if (buf_.size() >= total) {
          std::string reply = buf_.substr(0, total);
          buf_.erase(0, total);
          return reply;
        }
      }
      char chunk[16 << 10];
      const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
      if (n <= 0) throw Error(Errc::io_failure, "connection closed");
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  int fd_ = -1;
  std::string buf_;
};

}  // namespace pmkv::wire
