#include "oracles.hpp"

#include <pmkv/wire.hpp>

#include <gtest/gtest.h>

#include <thread>

using namespace pmkv;
using namespace pmkv::wire;

namespace {

Store small_store() {
  StoreConfig cfg;
  cfg.pool_size = 8ull << 20;
  return Store::open(cfg);
}

}  // namespace

TEST(Parse, GetFrame) {
  const ParseResult r = parse_command("GET 1\r\nk\r\n");
  ASSERT_EQ(r.status, ParseStatus::complete);
  EXPECT_EQ(r.command, (Command{Verb::get, "k", ""}));
  EXPECT_EQ(r.consumed, 10u);
}

TEST(Parse, SetFrameWithBinaryValue) {
  const std::string frame = std::string("SET 3\r\nfoo 4\r\n") + std::string("a\0 b", 4) + "\r\n";
  const ParseResult r = parse_command(frame);
  ASSERT_EQ(r.status, ParseStatus::complete);
  EXPECT_EQ(r.command, (Command{Verb::set, "foo", std::string("a\0 b", 4)}));
  EXPECT_EQ(r.consumed, frame.size());
}

TEST(Parse, MissingValueIsAnError) {
  const ParseResult r = parse_command("SET 1\r\nk\r\n");
  EXPECT_EQ(r.status, ParseStatus::error);
  EXPECT_FALSE(r.error.empty());
}

TEST(Parse, LengthPrefixMismatch) {
  EXPECT_EQ(parse_command("GET 3\r\nk\r\n").status, ParseStatus::error);
  EXPECT_EQ(parse_command("GET 1\r\nkey\r\n").status, ParseStatus::error);
  EXPECT_EQ(parse_command("SET 1\r\nk 1\r\nvv\r\n").status, ParseStatus::error);
  EXPECT_EQ(parse_command("SET 1\r\nk 3\r\nv\r\n").status, ParseStatus::error);
}

TEST(Parse, ErrorsNameTheOffendingToken) {
  EXPECT_NE(parse_command("FROB 1\r\n").error.find("FROB"), std::string::npos);
  EXPECT_NE(parse_command("GET -1\r\nk\r\n").error.find("-1"), std::string::npos);
  EXPECT_NE(parse_command("DEL 1x\r\nk\r\n").error.find("1x"), std::string::npos);
}

TEST(Parse, PartialFramesAskForMore) {
  const std::string frame = encode({Verb::set, "key", "value"});
  for (std::size_t n = 0; n < frame.size(); ++n)
    EXPECT_EQ(parse_command(std::string_view(frame).substr(0, n)).status, ParseStatus::incomplete) << n;
  EXPECT_EQ(parse_command(frame).status, ParseStatus::complete);
}

TEST(Parse, EncodeRoundTrips) {
  const Command cmds[] = {{Verb::ping, "", ""},
                          {Verb::shutdown, "", ""},
                          {Verb::get, "g", ""},
                          {Verb::del, "some key", ""},
                          {Verb::set, "k", ""},
                          {Verb::set, std::string("\0\xff", 2), std::string(70000, 'z')}};
  for (const Command& c : cmds) {
    const std::string bytes = encode(c);
    const ParseResult r = parse_command(bytes + "PING\r\n");
    ASSERT_EQ(r.status, ParseStatus::complete);
    EXPECT_EQ(r.command, c);
    EXPECT_EQ(r.consumed, bytes.size());
  }
}

// Any byte soup either parses, waits, or fails while consuming at least one byte.
TEST(Parse, TotalOnRandomInput) {
  std::mt19937_64 rng(5);
  const char alphabet[] = "SETGDLPINHU 0123456789\r\nk";
  for (int i = 0; i < 20000; ++i) {
    std::string s(rng() % 40, ' ');
    for (char& c : s) c = alphabet[rng() % (sizeof(alphabet) - 1)];
    const ParseResult r = parse_command(s);
    if (r.status != ParseStatus::incomplete) {
      ASSERT_GT(r.consumed, 0u) << s;
      ASSERT_LE(r.consumed, s.size());
    }
  }
}

TEST(Session, GoldenTranscripts) {
  for (auto [mode, alloc] : {std::pair{Mode::fully_persistent, AllocStrategy::per_object},
                             std::pair{Mode::hybrid, AllocStrategy::slab}, std::pair{Mode::snapshot, AllocStrategy::per_object}}) {
    const auto res = oracle::check_golden(PMKV_GOLDEN_DIR, mode, alloc);
    EXPECT_GE(res.checked.size(), 7u);
    EXPECT_TRUE(res.mismatched.empty()) << res.mismatched.front();
  }
}

TEST(Session, ProtocolErrorKeepsTheConnection) {
  Store store = small_store();
  EXPECT_EQ(run_session(store, "BOGUS\r\nSET 1\r\na 1\r\nb\r\nGET 1\r\na\r\n"),
            "-ERR protocol unknown command 'BOGUS'\r\n+OK\r\n$1\r\nb\r\n");
}

TEST(Server, PingSetGetOverTcp) {
  Store store = small_store();
  Server server(store, ServerOptions{"127.0.0.1", 0});
  server.bind_and_listen();
  ASSERT_NE(server.port(), 0);
  std::thread t([&] { server.serve(); });
  {
    Client c("127.0.0.1", server.port());
    EXPECT_EQ(c.roundtrip("PING\r\n"), "+PONG\r\n");
    EXPECT_EQ(c.roundtrip("SET 3\r\nfoo 3\r\nbar\r\n"), "+OK\r\n");
    EXPECT_EQ(c.roundtrip("GET 3\r\nfoo\r\n"), "$3\r\nbar\r\n");
    EXPECT_EQ(c.roundtrip("GET 1\r\nk"
                          "xx\r\n"),
              "-ERR protocol length mismatch\r\n");
    EXPECT_EQ(c.call({Verb::del, "foo", ""}), ":1\r\n");
    EXPECT_EQ(c.call({Verb::get, "foo", ""}), "$-1\r\n");
    EXPECT_EQ(c.call({Verb::shutdown, "", ""}), "+OK\r\n");
  }
  t.join();
}

TEST(Server, BindFailureIsReported) {
  Store store = small_store();
  Server first(store, ServerOptions{"127.0.0.1", 0});
  first.bind_and_listen();
  Server second(store, ServerOptions{"127.0.0.1", first.port()});
  try {
    second.bind_and_listen();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::bind_failure);
  }
}

TEST(Server, TwoClientsMatchASerialOracle) {
  const auto res = oracle::concurrent_clients(2, 1000);
  EXPECT_EQ(res.bad_replies, 0u);
  EXPECT_EQ(res.keys, 2000u);
  EXPECT_TRUE(res.matches_oracle);
  EXPECT_TRUE(res.shared_is_a_last_write);
}
