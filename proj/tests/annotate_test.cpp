#include <gtest/gtest.h>

#include <random>

#include "rtool/annotate.hpp"

using namespace rtool;

namespace {

std::string fixture(const std::string& name) { return std::string(RTOOL_FIXTURES) + "/annotation/" + name; }

/// Random tree over n words: each phrase splits its span into 1..3 contiguous children.
TreeNode random_tree(std::mt19937_64& rng, int first, int last, int depth = 0) {
  TreeNode n;
  if (first == last) {
    n.label = "N";
    TreeNode leaf;
    leaf.leaf = true;
    leaf.label = "w" + std::to_string(first);
    n.children.push_back(leaf);
    if (rng() % 4 == 0) {  // occasional unary chain above a preterminal
      TreeNode up;
      up.label = "NP";
      up.children.push_back(std::move(n));
      return up;
    }
    return n;
  }
  n.label = depth == 0 ? "S" : (rng() % 2 ? "NP" : "VP");
  const int span = last - first + 1;
  const int k = std::min<int>(span, 2 + static_cast<int>(rng() % 2));
  std::vector<int> cuts;
  for (int i = first + 1; i <= last; ++i) cuts.push_back(i);
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(static_cast<std::size_t>(k - 1));
  std::sort(cuts.begin(), cuts.end());
  int start = first;
  for (int c : cuts) {
    n.children.push_back(random_tree(rng, start, c - 1, depth + 1));
    start = c;
  }
  n.children.push_back(random_tree(rng, start, last, depth + 1));
  return n;
}

TreeNode right_branching(int n) {
  // (S (N w0) (S (N w1) ... (N w_{n-1})))
  TreeNode pt;
  pt.label = "N";
  TreeNode leaf;
  leaf.leaf = true;
  leaf.label = "w" + std::to_string(n - 1);
  pt.children.push_back(leaf);
  TreeNode cur = pt;
  for (int i = n - 2; i >= 0; --i) {
    TreeNode p;
    p.label = "S";
    TreeNode w;
    w.label = "N";
    TreeNode l;
    l.leaf = true;
    l.label = "w" + std::to_string(i);
    w.children.push_back(l);
    p.children.push_back(w);
    p.children.push_back(cur);
    cur = p;
  }
  return cur;
}

}  // namespace

TEST(Tree, ParsesTwoLeafTree) {
  auto t = parse_tree("(S (NP (N dogs)) (VP (V bark)))");
  EXPECT_EQ(t.label, "S");
  EXPECT_EQ(leaves(t), (std::vector<std::string>{"dogs", "bark"}));
}

TEST(Tree, UnwrapsUnlabeledRoot) {
  auto t = parse_tree("( (S (N a) (V b)) )");
  EXPECT_EQ(t.label, "S");
}

TEST(Tree, MalformedTreeReportsLine) {
  try {
    parse_tree_lines({"(S (N a))", "", "(S (NP"}, "trees.txt");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_tree("(S (N a)))"), Error);
  EXPECT_THROW(parse_tree("(S )"), Error);
}

TEST(Tree, BinarizationIsRightFactoredAndPreservesLeaves) {
  auto t = parse_tree("(NP (D a) (A b) (A c) (N d))");
  auto b = binarize_right(t);
  EXPECT_EQ(leaves(b), leaves(t));
  ASSERT_EQ(b.children.size(), 2u);
  EXPECT_EQ(b.children[1].label, "@NP");
  EXPECT_EQ(b.children[1].children[1].label, "@NP");
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    auto r = random_tree(rng, 0, 1 + static_cast<int>(rng() % 12));
    auto rb = binarize_right(r);
    EXPECT_EQ(leaves(rb), leaves(r));
    for (const auto& n : FlatTree::build(rb).nodes) EXPECT_LE(n.children.size(), 2u);
  }
}

TEST(Tree, BaseLabelStripsFunctionTags) {
  EXPECT_EQ(base_label("NP-SBJ"), "NP");
  EXPECT_EQ(base_label("NP=2"), "NP");
  EXPECT_EQ(base_label("-NONE-"), "-NONE-");
  EXPECT_EQ(base_label("S"), "S");
}

TEST(Annotate, LeafCountMismatchIsAlignmentError) {
  auto t = parse_tree("(S (NP (D the) (N dog)) (VP (V ran) (ADV away) (ADV fast)))");
  EXPECT_THROW(annotate_sentence(t, {"the", "dog", "ran", "away"}, {}), AlignmentError);
}

TEST(Annotate, NamedEntities) {
  const std::set<std::string, std::less<>> excl = {"I"};
  auto ne = mark_named_entities({"Then", "Presley", "and", "I", "saw", "a", "dog"}, excl);
  EXPECT_EQ(ne, (std::vector<bool>{false, true, false, false, false, false, false}));
  const std::set<std::string, std::less<>> more = {"I", "Mr"};
  EXPECT_FALSE(mark_named_entities({"hello", "Mr"}, more)[1]);
  EXPECT_TRUE(mark_named_entities({"hello", "Mr"}, excl)[1]);
}

TEST(Annotate, DltAdjacentNounVerb) {
  // noun -> finite verb, no interveners: the verb's own referent bonus only
  auto c = dlt_cost(2, {{0, 1}}, {true, true});
  EXPECT_EQ(c[1], 1);
  // a word that completes no arc and is not a referent costs nothing
  auto d = dlt_cost(3, {{0, 2}}, {true, false, true});
  EXPECT_EQ(d[1], 0);
  EXPECT_EQ(d[2], 1);
}

TEST(Annotate, DltCountsStrictInterveners) {
  // arc 0 -> 4 with referents at 1 and 3 between; word 4 is a referent
  auto c = dlt_cost(5, {{0, 4}}, {false, true, false, true, true});
  EXPECT_EQ(c, (std::vector<int>{0, 1, 0, 1, 3}));
  EXPECT_THROW(dlt_cost(2, {{1, 1}}, {true, true}), ValidationError);
  EXPECT_THROW(dlt_cost(2, {{0, 2}}, {true, true}), ValidationError);
}

TEST(Annotate, DltIgnoresArcsEndingElsewhere) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 3 + static_cast<int>(rng() % 10);
    std::vector<bool> ref(static_cast<std::size_t>(n));
    for (auto&& r : ref) r = rng() % 2;
    std::vector<DependencyArc> arcs;
    for (int k = 0; k < n; ++k) {
      int a = static_cast<int>(rng() % n), b = static_cast<int>(rng() % n);
      if (a != b) arcs.push_back({a, b});
    }
    const int j = static_cast<int>(rng() % n);
    auto base = dlt_cost(static_cast<std::size_t>(n), arcs, ref);
    auto more = arcs;
    for (int k = 0; k < 5; ++k) {
      int a = static_cast<int>(rng() % n), b = static_cast<int>(rng() % n);
      if (a != b && std::max(a, b) != j) more.push_back({a, b});
    }
    EXPECT_EQ(dlt_cost(static_cast<std::size_t>(n), more, ref)[static_cast<std::size_t>(j)],
              base[static_cast<std::size_t>(j)]);
  }
}

TEST(Annotate, RightBranchingHasNoCenterEmbedding) {
  auto f = leftcorner_features(parse_tree("(S (NP (N dogs)) (VP (V bark)))"));
  for (int d : f.embedding_depth) EXPECT_LE(d, 1);
  for (int c : f.ends_center_embedding_len) EXPECT_EQ(c, 0);
  for (int n = 1; n <= 12; ++n) {
    auto g = leftcorner_features(right_branching(n));
    for (int i = 0; i + 1 < n; ++i) EXPECT_EQ(g.embedding_depth[static_cast<std::size_t>(i)], 1) << n;
    EXPECT_EQ(g.embedding_depth.back(), 0);
    for (int c : g.ends_center_embedding_len) EXPECT_EQ(c, 0);
  }
}

TEST(Annotate, SubjectRelativeClauseEndsEmbedding) {
  auto f = leftcorner_features(
      parse_tree("(S (NP (NP (D the) (N dog)) (RC (R that) (V barked))) (VP (V ran)))"));
  EXPECT_EQ(f.embedding_depth, (std::vector<int>{2, 2, 2, 1, 0}));
  EXPECT_EQ(f.ends_center_embedding_len, (std::vector<int>{0, 2, 0, 4, 0}));
}

TEST(Annotate, DepthChangesBalance) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    auto t = random_tree(rng, 0, static_cast<int>(rng() % 15));
    auto f = leftcorner_features(t);
    int up = 0, down = 0, prev = 0;
    for (int d : f.embedding_depth) {
      EXPECT_GE(d, 0);
      (d > prev ? up : down) += std::abs(d - prev);
      prev = d;
    }
    EXPECT_EQ(f.embedding_depth.back(), 0);
    for (std::size_t i = 0; i + 1 < f.embedding_depth.size(); ++i) EXPECT_GT(f.embedding_depth[i], 0);
    EXPECT_EQ(up, down);
    for (int c : f.ends_center_embedding_len) EXPECT_GE(c, 0);
  }
}

TEST(Annotate, CoordinatedClausesFlagFirstConjunct) {
  auto f = leftcorner_features(parse_tree("(S (S (NP (N dogs)) (VP (V bark))) (CC and) (S (NP (N cats)) (VP (V meow))))"));
  EXPECT_EQ(f.ends_first_conjunct, (std::vector<bool>{false, true, false, false, false}));
  EXPECT_EQ(f.ends_first_conjunct_np, (std::vector<bool>(5, false)));
  EXPECT_EQ(f.before_sentential_clause, (std::vector<bool>{false, false, true, false, false}));
}

TEST(Annotate, AdjectivalNounPhrase) {
  auto f = leftcorner_features(parse_tree("(NP (D a) (N family) (N size) (N pack))"));
  EXPECT_EQ(f.begins_adjectival_np, (std::vector<bool>{false, true, false, false}));
}

TEST(Annotate, HeadPercolationFallback) {
  auto arcs = head_dependencies(parse_tree("(S (NP (D the) (N dog)) (VP (V bit) (NP (D a) (N man))))"));
  std::vector<std::pair<int, int>> got;
  for (const auto& a : arcs) got.emplace_back(a.dependent, a.head);
  EXPECT_EQ(got, (std::vector<std::pair<int, int>>{{0, 1}, {1, 2}, {3, 4}, {4, 2}}));
}

TEST(Annotate, HandAnnotatedFixtureMatchesManifest) {
  auto corpus = ingest_file(fixture("corpus.tsv"), Modality::spr);
  auto index = text::TsvReader::from_file(fixture("trees.index.tsv"));
  auto trees = load_trees(text::read_file(fixture("trees.txt")), "trees.txt", index, corpus);
  auto deps = load_dependencies(text::TsvReader::from_file(fixture("deps.tsv")));
  auto props = annotate_corpus(corpus, trees, &deps);
  auto manifest = read_properties(text::TsvReader::from_file(fixture("manifest.tsv")), corpus.tokens.size());
  ASSERT_EQ(props.size(), 67u);
  int ce4 = 0, dlt3 = 0;
  for (std::size_t i = 0; i < props.size(); ++i) {
    ASSERT_TRUE(props[i] && manifest[i]) << i;
    const auto& p = *props[i];
    const auto& m = *manifest[i];
    const auto& w = corpus.tokens[i].surface;
    EXPECT_EQ(p.pos_category, m.pos_category) << w;
    EXPECT_EQ(p.coarse, m.coarse) << w;
    EXPECT_EQ(p.is_named_entity, m.is_named_entity) << w;
    EXPECT_EQ(p.dlt_cost, m.dlt_cost) << w << " @" << i;
    EXPECT_EQ(p.embedding_depth, m.embedding_depth) << w << " @" << i;
    EXPECT_EQ(p.ends_center_embedding_len, m.ends_center_embedding_len) << w << " @" << i;
    EXPECT_EQ(p.before_sentential_clause, m.before_sentential_clause) << w << " @" << i;
    EXPECT_EQ(p.ends_first_conjunct, m.ends_first_conjunct) << w;
    EXPECT_EQ(p.ends_first_conjunct_np, m.ends_first_conjunct_np) << w;
    EXPECT_EQ(p.begins_adjectival_np, m.begins_adjectival_np) << w;
    ce4 += m.ends_center_embedding_len == 4;
    dlt3 += m.dlt_cost >= 3;
  }
  EXPECT_GT(ce4, 0);
  EXPECT_GT(dlt3, 0);
}

TEST(Annotate, PropertiesTableRoundTrips) {
  auto corpus = ingest_file(fixture("corpus.tsv"), Modality::spr);
  auto trees = load_trees(text::read_file(fixture("trees.txt")), "trees.txt",
                          text::TsvReader::from_file(fixture("trees.index.tsv")), corpus);
  auto props = annotate_corpus(corpus, trees, nullptr);
  auto text_out = write_properties(corpus, props);
  auto back = read_properties(text::TsvReader(text_out, "props"), corpus.tokens.size());
  EXPECT_EQ(back, props);
  EXPECT_EQ(write_properties(corpus, back), text_out);
}

TEST(Annotate, TreeCountMustMatchSentences) {
  auto corpus = ingest_file(fixture("corpus.tsv"), Modality::spr);
  EXPECT_THROW(load_trees("(S (N a))\n", "t", std::nullopt, corpus), AlignmentError);
}
