#pragma once

// Bracketed syntactic trees: parsing, right-factored binarization, and a flat node arena
// with spans and parent links used by the structural annotators.

#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtool/error.hpp"

namespace rtool {

struct TreeNode {
  std::string label;  // category; for leaves, the word itself
  std::vector<TreeNode> children;
  bool leaf = false;

  bool preterminal() const { return !leaf && children.size() == 1 && children[0].leaf; }
};

namespace detail {

class TreeLexer {
 public:
  explicit TreeLexer(std::string_view s) : s_(s) {}

  void skip_space() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool at_end() {
    skip_space();
    return pos_ >= s_.size();
  }
  char peek() {
    skip_space();
    return pos_ < s_.size() ? s_[pos_] : '\0';
  }
  void expect(char c) {
    if (peek() != c) throw Error(std::string("expected '") + c + "' at column " + std::to_string(pos_ + 1));
    ++pos_;
  }
  std::string atom() {
    skip_space();
    std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != '(' && s_[pos_] != ')' &&
           !std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
    return std::string(s_.substr(start, pos_ - start));
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

inline TreeNode parse_node(TreeLexer& lx) {
  lx.expect('(');
  TreeNode node;
  if (lx.peek() != '(') node.label = lx.atom();
  while (true) {
    char c = lx.peek();
    if (c == ')') {
      lx.expect(')');
      break;
    }
    if (c == '\0') throw Error("unbalanced parentheses: missing ')'");
    if (c == '(') {
      node.children.push_back(parse_node(lx));
    } else {
      TreeNode leaf;
      leaf.leaf = true;
      leaf.label = lx.atom();
      node.children.push_back(std::move(leaf));
    }
  }
  if (node.children.empty()) throw Error("empty constituent '" + node.label + "'");
  return node;
}

}  // namespace detail

/// Parses one bracketed tree, e.g. "(S (NP (N dogs)) (VP (V bark)))". An unlabeled
/// single-child wrapper such as "( (S ...))" is removed.
inline TreeNode parse_tree(std::string_view line) {
  detail::TreeLexer lx(line);
  TreeNode root = detail::parse_node(lx);
  if (!lx.at_end()) throw Error("unbalanced parentheses: trailing text after tree");
  while (root.label.empty() && root.children.size() == 1 && !root.children[0].leaf) {
    TreeNode inner = std::move(root.children[0]);
    root = std::move(inner);
  }
  if (root.label.empty()) throw Error("tree root has no label");
  return root;
}

/// One tree per non-blank line; errors carry the 1-based line number.
inline std::vector<TreeNode> parse_tree_lines(const std::vector<std::string>& lines, const std::string& name) {
  std::vector<TreeNode> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view l = lines[i];
    if (l.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.push_back(parse_tree(l));
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(name, i + 1, e.what());
    }
  }
  return out;
}

inline void collect_leaves(const TreeNode& n, std::vector<std::string>& out) {
  if (n.leaf) {
    out.push_back(n.label);
    return;
  }
  for (const auto& c : n.children) collect_leaves(c, out);
}

inline std::vector<std::string> leaves(const TreeNode& n) {
  std::vector<std::string> out;
  collect_leaves(n, out);
  return out;
}

/// Right-factored binarization: (X a b c d) becomes (X a (@X b (@X c d))).
inline TreeNode binarize_right(const TreeNode& n) {
  if (n.leaf) return n;
  TreeNode out;
  out.label = n.label;
  if (n.children.size() <= 2) {
    for (const auto& c : n.children) out.children.push_back(binarize_right(c));
    return out;
  }
  out.children.push_back(binarize_right(n.children.front()));
  TreeNode rest;
  rest.label = n.label.starts_with('@') ? n.label : "@" + n.label;
  rest.children.assign(n.children.begin() + 1, n.children.end());
  out.children.push_back(binarize_right(rest));
  return out;
}

/// Category part of a label: "NP-SBJ" -> "NP", "N-aD" -> "N". Labels beginning with '-'
/// (such as "-NONE-") are returned unchanged.
inline std::string_view base_label(std::string_view label) {
  if (label.empty() || label.front() == '-') return label;
  auto cut = label.find_first_of("-=");
  return cut == std::string_view::npos ? label : label.substr(0, cut);
}

/// Flattened tree with word spans; leaves are excluded, preterminals carry word indices.
struct FlatTree {
  struct Node {
    std::string label;
    int parent = -1;
    std::vector<int> children;
    int first = 0;  // first word index (0-based)
    int last = 0;   // last word index, inclusive
    int word = -1;  // word index for preterminals
  };
  std::vector<Node> nodes;  // nodes[0] is the root
  std::vector<int> preterminal_of;  // word index -> node id
  int n_words = 0;

  static FlatTree build(const TreeNode& root) {
    FlatTree t;
    t.add(root, -1);
    if (t.n_words == 0) throw Error("tree has no words");
    return t;
  }

  int length(int id) const { return nodes[static_cast<std::size_t>(id)].last - nodes[static_cast<std::size_t>(id)].first + 1; }

  /// Position of `id` among its parent's children, or -1 for the root.
  int child_rank(int id) const {
    const int p = nodes[static_cast<std::size_t>(id)].parent;
    if (p < 0) return -1;
    const auto& ch = nodes[static_cast<std::size_t>(p)].children;
    for (std::size_t k = 0; k < ch.size(); ++k)
      if (ch[k] == id) return static_cast<int>(k);
    return -1;
  }

 private:
  int add(const TreeNode& n, int parent) {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back({});
    nodes.back().label = n.label;
    nodes.back().parent = parent;
    nodes.back().first = n_words;
    if (n.preterminal()) {
      nodes.back().word = n_words;
      preterminal_of.push_back(id);
      ++n_words;
    } else {
      for (const auto& c : n.children) {
        if (c.leaf) {
          // a bare word under a phrasal node: wrap it as its own preterminal
          TreeNode pt;
          pt.label = c.label;
          pt.children.push_back(c);
          const int cid = add(pt, id);
          nodes[static_cast<std::size_t>(id)].children.push_back(cid);
        } else {
          const int cid = add(c, id);
          nodes[static_cast<std::size_t>(id)].children.push_back(cid);
        }
      }
    }
    nodes[static_cast<std::size_t>(id)].last = n_words - 1;
    return id;
  }
};

}  // namespace rtool
