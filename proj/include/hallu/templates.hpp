#pragma once

#include <map>
#include <string>
#include <string_view>

namespace hallu::templates {

/// Question/answer generation prompt. Placeholders: {title}, {section_before_passage},
/// {passage_text}.
inline constexpr std::string_view kQaGeneration =
    R"(<<sys>>You are perfect at creating a question based on a sentence and its previous context. You also cite the answer to those questions from the given sentence.<</sys>>
### PREVIOUS CONTEXT
Title: '{title}'
{section_before_passage}

### SENTENCE
{passage_text}

### OBJECTIVE
Write a question solely based on the given SENTENCE. This SENTENCE contains the definite answer which you also quote. This quote is definitely part of the SENTENCE. The question does not have the same wording as the SENTENCE. The question is 'globally' phrased and not 'locally', meaning that the question can be asked in a Retrieval Augmented Generation application.

### RESPONSE
The json format of your response should look like this:
```json
{
    "answer_quote": <answer copied from the sentence (as brief as possible)>,
    "question": <question that is answer with the answer_quote>
}
```
Ensure your response can be parsed using Python json.loads)";

/// "rlm/rag-prompt" from the LangChain hub, reworded to "as few sentences as possible".
inline constexpr std::string_view kRagHub =
    R"(You are an assistant for question-answering tasks. Use the following pieces of retrieved context to answer the question. If you don't know the answer, just say that you don't know. Use as few sentences as possible and keep the answer concise.
Question: {question}
Context: {context}
Answer:)";

inline constexpr std::string_view kRagTemplate1 =
    R"(<<sys>>You are a helpful, respectful, and honest assistant for a question-answering task. You are provided pieces of context that MIGHT contain the answer to the question. Your concise answer should solely be based on these pieces. Always answer as helpfully as possible, while being safe. Your answer should not include any harmful, unethical, racist, sexist, toxic, dangerous, or illegal content. If a question does not make any sense, or is not factually coherent, explain why instead of answering something not correct. If you don't know the answer to a question, state that so you don't share false information. Do not refer to chunks literally. Do not use the word 'chunk', just use their information for your answer. Do NOT start with 'Based on...'<</sys>>
Your knowledge is limited to only this information:
{context}
QUESTION: {question}
BRIEF ANSWER:)";

inline constexpr std::string_view kRagTemplate2 =
    R"(<<sys>>You are a helpful, respectful, and honest assistant for a question-answering task. You are provided pieces of context that MIGHT contain the answer to the question. Your concise answer should solely be based on these pieces. Always answer as helpfully as possible, while being safe. Your answer should not include any harmful, unethical, racist, sexist, toxic, dangerous, or illegal content. If a question does not make any sense, or is not factually coherent, explain why instead of answering something not correct. If you don't know the answer to a question, state that so you don't share false information.<</sys>>
Only use the information included in these chunks to answer the question:
{context}
QUESTION: {question}
REMINDER: If no chunk contains the information asked for, briefly explain that you cannot answer the question. However, do not refer to chunks literally. Do not use the word 'chunk' or that chunks were provided to you, just use their information to answer the QUESTION. Do NOT start with 'Based on...'
BRIEF RESPONSE:)";

/// Single left-to-right substitution of `{key}` placeholders. Braces that do not
/// enclose a known key (the JSON example above) are copied verbatim, and substituted
/// values are never rescanned.
inline std::string render(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            auto close = tmpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                auto it = values.find(tmpl.substr(i + 1, close - i - 1));
                if (it != values.end()) {
                    out.append(it->second);
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tmpl[i]);
        ++i;
    }
    return out;
}

}  // namespace hallu::templates
