#include <gtest/gtest.h>

#include "moeclip/config.hpp"

using namespace moeclip;

TEST(Config, DefaultsMatchReferenceSettings) {
  const TrainConfig c;
  EXPECT_EQ(c.num_experts, 4u);
  EXPECT_EQ(c.top_k, 2u);
  EXPECT_EQ(c.rank, 8u);
  EXPECT_EQ(c.alpha, 16.0);
  EXPECT_EQ(c.dropout, 0.05);
  EXPECT_EQ(c.lambda_moe, 0.1);
  EXPECT_EQ(c.scales, (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_EQ(c.lambda_etf, 0.01);
  EXPECT_EQ(c.lambda_bal, 0.01);
  EXPECT_EQ(c.lr, 5e-4);
  EXPECT_EQ(c.beta1, 0.5);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.norm_eps, 1e-6);
  EXPECT_EQ(c.lr_decay_factor, 0.5);
  EXPECT_EQ(c.n_seen, 3u);
  EXPECT_EQ(c.n_classes - c.n_seen, 2u);
  EXPECT_EQ(c.n_train, 200u);
  EXPECT_EQ(c.expert_alpha() / static_cast<double>(c.rank), 2.0);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, FormatParseRoundTrip) {
  TrainConfig c;
  c.seed = 12345;
  c.lambda_etf = 0.037;
  c.scales = {1, 3};
  c.lr_decay_milestones = {0.25, 0.5, 0.75};
  c.use_fofs = false;
  c.tau = 0.1 + 0.2;  // not exactly representable in short decimal
  EXPECT_EQ(parse_config(format_config(c)), c);
  EXPECT_EQ(parse_config(format_config(TrainConfig{})), TrainConfig{});
}

TEST(Config, CommentsBlankLinesAndPartialFiles) {
  const TrainConfig c = parse_config("# header\n\n  seed = 7   # trailing\nlambda_bal=0\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.lambda_bal, 0.0);
  EXPECT_EQ(c.num_experts, 4u);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config("bogus = 1\n"), FormatError);
  EXPECT_THROW(parse_config("seed\n"), FormatError);
  EXPECT_THROW(parse_config("seed = abc\n"), FormatError);
  EXPECT_THROW(parse_config("lr = 1e-3x\n"), FormatError);
  EXPECT_THROW(parse_config("use_fofs = maybe\n"), FormatError);
  EXPECT_THROW(parse_config("scales = \n"), FormatError);
}

TEST(Config, RejectsInconsistentValues) {
  EXPECT_THROW(parse_config("top_k = 5\n"), FormatError);
  EXPECT_THROW(parse_config("top_k = 0\n"), FormatError);
  EXPECT_THROW(parse_config("lambda_moe = 1.5\n"), FormatError);
  EXPECT_THROW(parse_config("scales = 1,2\n"), FormatError);
  EXPECT_THROW(parse_config("scales = 9\n"), FormatError);
  EXPECT_THROW(parse_config("rank = 17\n"), FormatError);  // 64 / 4 = 16 dims per expert
  EXPECT_NO_THROW(parse_config("rank = 17\nuse_fofs = false\n"));
  EXPECT_THROW(parse_config("n_seen = 5\n"), FormatError);
  EXPECT_THROW(parse_config("dropout = 1\n"), FormatError);
  EXPECT_THROW(parse_config("num_experts = 1\n"), FormatError);  // ETF needs two experts
  EXPECT_NO_THROW(parse_config("num_experts = 1\ntop_k = 1\nlambda_etf = 0\n"));
  EXPECT_THROW(parse_config("lr_decay_milestones = 0.5,1.5\n"), FormatError);
}

TEST(Config, MissingFileThrows) { EXPECT_THROW(load_config("/nonexistent/moeclip.conf"), FormatError); }
