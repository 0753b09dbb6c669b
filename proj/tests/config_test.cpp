#include <gtest/gtest.h>

#include <sstream>

#include "remo/config.hpp"

namespace remo {
namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "test.conf");
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kProtocol;  // sentinel: nothing thrown
}

TEST(ConfigTest, EmptyFileGivesDefaults) {
  EXPECT_EQ(parse(""), RunConfig{});
  EXPECT_EQ(parse("\n   \n# only a comment\n"), RunConfig{});
  const RunConfig c;
  EXPECT_EQ(c.model, ModelConfig{});
  EXPECT_EQ(c.prompts, 100u);
  EXPECT_EQ(c.transport, "inproc");
}

TEST(ConfigTest, ParsesValuesAndComments) {
  const RunConfig c = parse(
      "vocab = 128   # bigger vocabulary\n"
      "  d=16\n"
      "ratios = 0, 0.25,3\n"
      "hook_force_square = true\n"
      "transport = tcp:localhost:9000\n"
      "f = 8\n");
  EXPECT_EQ(c.model.vocab, 128u);
  EXPECT_EQ(c.model.d, 16u);
  EXPECT_EQ(c.ratios, (std::vector<double>{0, 0.25, 3}));
  EXPECT_TRUE(c.hook_force_square);
  EXPECT_EQ(c.transport, "tcp:localhost:9000");
  EXPECT_EQ(c.model.params.f, 8u);
}

TEST(ConfigTest, UnknownKeyNamesKeyAndLine) {
  try {
    parse("vocab = 64\n\nbogus_knob = 3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseError);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bogus_knob"), std::string::npos);
    EXPECT_NE(msg.find("test.conf:3"), std::string::npos);
  }
}

TEST(ConfigTest, MalformedLinesRejected) {
  EXPECT_EQ(code_of([] { parse("vocab 64\n"); }), ErrorCode::kParseError);
  EXPECT_EQ(code_of([] { parse("vocab = sixty\n"); }), ErrorCode::kParseError);
  EXPECT_EQ(code_of([] { parse("vocab = -1\n"); }), ErrorCode::kParseError);
  EXPECT_EQ(code_of([] { parse("vocab = 1\nvocab = 2\n"); }), ErrorCode::kParseError);
  EXPECT_EQ(code_of([] { parse("hook_force_square = maybe\n"); }), ErrorCode::kParseError);
  EXPECT_EQ(code_of([] { parse("ratios = \n"); }), ErrorCode::kParseError);
}

TEST(ConfigTest, RoundTripNormalizes) {
  const std::string messy = "  seed=7 # comment\nlambda =2.50\nbench_clients = 1 ,3\n";
  const RunConfig c = parse(messy);
  const std::string normal = serialize_config(c);
  EXPECT_EQ(parse(normal), c);
  EXPECT_EQ(serialize_config(parse(normal)), normal);
  EXPECT_NE(normal.find("lambda = 2.5\n"), std::string::npos);
  EXPECT_NE(normal.find("bench_clients = 1,3\n"), std::string::npos);
}

TEST(ConfigTest, RoundTripRandomConfigs) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    RunConfig c;
    c.model.vocab = 2 + uniform_below(rng, 500);
    c.seed = rng();
    c.lambda = uniform_real(rng, 0.001, 1e6);
    c.zipf_s = uniform_real(rng, 0, 3);
    c.ratios.assign(1 + uniform_below(rng, 5), 0.0);
    for (auto& r : c.ratios) r = uniform_real(rng, 0, 5);
    c.hook_corrupt_prompt = static_cast<std::int64_t>(uniform_below(rng, 10)) - 1;
    c.hook_force_square = fair_coin(rng);
    EXPECT_EQ(parse(serialize_config(c)), c);
  }
}

TEST(ConfigTest, OverridesApply) {
  RunConfig c;
  apply_override(c, "prompts=5");
  apply_override(c, " max_new = 3 ");
  EXPECT_EQ(c.prompts, 5u);
  EXPECT_EQ(c.max_new, 3u);
  EXPECT_EQ(code_of([&] { apply_override(c, "nokey=1"); }), ErrorCode::kParseError);
  EXPECT_EQ(code_of([&] { apply_override(c, "prompts"); }), ErrorCode::kParseError);
}

TEST(ConfigTest, SubSeedsAreDistinct) {
  RunConfig c;
  c.seed = 10;
  const std::set<std::uint64_t> s{c.model_seed(), c.mask_seed(), c.corpus_seed(), c.trial_seed()};
  EXPECT_EQ(s.size(), 4u);
}

TEST(ConfigTest, TransportSpecs) {
  EXPECT_EQ(parse_transport("inproc").kind, TransportSpec::Kind::kInProcess);
  EXPECT_EQ(parse_transport("tcp").kind, TransportSpec::Kind::kLocalTcp);
  const auto t = parse_transport("tcp:10.0.0.2:7433");
  EXPECT_EQ(t.kind, TransportSpec::Kind::kRemoteTcp);
  EXPECT_EQ(t.host, "10.0.0.2");
  EXPECT_EQ(t.port, 7433);
  for (const char* bad : {"udp", "tcp:", "tcp:host", "tcp:host:0", "tcp:host:70000", "tcp:h:p"}) {
    EXPECT_EQ(code_of([&] { parse_transport(bad); }), ErrorCode::kParseError) << bad;
  }
}

TEST(ConfigTest, LoadMissingFile) {
  EXPECT_EQ(code_of([] { load_config("/nonexistent/remo.conf"); }), ErrorCode::kParseError);
}

}  // namespace
}  // namespace remo
